//! Knowledge probes: cloze-style examples over the three categories, split
//! into validation and test by subject entity so the profiler never sees
//! evaluation subjects.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{stage_rng, EntityKind, Fact, World};
use crate::error::{Result, TglError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeCategory {
    /// A changed relation of an existing entity (knowledge update).
    Update,
    /// A fact about an entity introduced this year (knowledge acquisition).
    NewEntity,
    /// A static fact seen in every year (retention / forgetting lens).
    Popular,
}

impl ProbeCategory {
    pub const ALL: [ProbeCategory; 3] =
        [ProbeCategory::Update, ProbeCategory::NewEntity, ProbeCategory::Popular];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeCategory::Update => "update",
            ProbeCategory::NewEntity => "new_entity",
            ProbeCategory::Popular => "popular",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSplit {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeExample {
    pub id: String,
    pub year: usize,
    pub category: ProbeCategory,
    pub split: ProbeSplit,
    pub left_context: String,
    pub answer: String,
}

/// Left context of a fact probe: the relation's first pattern cut at the
/// object slot, e.g. "E17 holds the position of".
fn probe_context(world: &World, fact: &Fact) -> Option<String> {
    let pattern = &world.relations[fact.relation].patterns[0];
    let cut = pattern.find("{O}")?;
    let prefix = pattern[..cut]
        .replace("{S}", &world.entities[fact.subject].name)
        .trim()
        .to_string();
    if prefix.is_empty() {
        None
    } else {
        Some(prefix)
    }
}

/// Generate all three probe categories for one year. Update and NewEntity
/// need `year >= 1`; Popular probes exist for every year.
pub fn gen_probes(world: &World, year: usize) -> Result<Vec<ProbeExample>> {
    if year == 0 || year > world.spec.n_years {
        return Err(TglError::input(format!(
            "probe year {year} out of range 1..={}",
            world.spec.n_years
        )));
    }

    // Candidate facts per category, keyed by subject for the split.
    let mut candidates: BTreeMap<ProbeCategory, Vec<&Fact>> = BTreeMap::new();
    for fact in world.facts_newly_valid_at(year) {
        match world.entities[fact.subject].kind {
            EntityKind::Mutable => candidates
                .entry(ProbeCategory::Update)
                .or_default()
                .push(fact),
            EntityKind::New(intro) if intro == year => candidates
                .entry(ProbeCategory::NewEntity)
                .or_default()
                .push(fact),
            _ => {}
        }
    }
    for fact in &world.facts {
        if world.entities[fact.subject].kind == EntityKind::Popular {
            candidates
                .entry(ProbeCategory::Popular)
                .or_default()
                .push(fact);
        }
    }

    let mut probes = Vec::new();
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for category in ProbeCategory::ALL {
        let facts = candidates.remove(&category).unwrap_or_default();
        // Split subjects, not examples: a subject's probes land in one split.
        let mut subjects: Vec<usize> = facts.iter().map(|f| f.subject).collect();
        subjects.sort_unstable();
        subjects.dedup();
        let mut rng = stage_rng(
            world.spec.seed,
            &format!("probe_split_y{year}_{}", category.as_str()),
        );
        subjects.shuffle(&mut rng);
        let n_validation = subjects.len() / 2;
        let validation: std::collections::BTreeSet<usize> =
            subjects.iter().take(n_validation).copied().collect();

        let mut n = 0;
        for fact in facts {
            let Some(context) = probe_context(world, fact) else {
                continue;
            };
            let split = if validation.contains(&fact.subject) {
                ProbeSplit::Validation
            } else {
                ProbeSplit::Test
            };
            probes.push(ProbeExample {
                id: format!("probe_y{year}_{}_{n}", category.as_str()),
                year,
                category,
                split,
                left_context: context,
                answer: fact.object.clone(),
            });
            n += 1;
        }
        counts.insert(category.as_str(), n);
    }

    if let Some((cat, _)) = counts.iter().find(|(_, &n)| n == 0) {
        return Err(TglError::data(format!(
            "no probes generated for category '{cat}' in year {year}; counts: {counts:?}"
        )));
    }
    Ok(probes)
}

pub fn write_probes(probes: &[ProbeExample], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    for p in probes {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load probes from a JSONL file in the documented record format. External
/// probe exports in the same format drop in unchanged.
pub fn read_probes(path: impl AsRef<Path>) -> Result<Vec<ProbeExample>> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| TglError::data(format!("cannot open {}: {e}", path.as_ref().display())))?;
    let mut probes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: ProbeExample = serde_json::from_str(&line).map_err(|e| TglError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if p.left_context.is_empty() || p.answer.is_empty() {
            return Err(TglError::Parse {
                line: i + 1,
                msg: "probe needs nonempty left_context and answer".to_string(),
            });
        }
        probes.push(p);
    }
    Ok(probes)
}
