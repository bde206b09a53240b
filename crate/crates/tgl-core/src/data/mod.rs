//! Synthetic temporal world: entities, time-scoped facts, yearly corpora,
//! knowledge probes, and a closed-vocabulary tokenizer.
//!
//! Year 0 is the base snapshot; years 1..=n_years are edit streams. Facts
//! carry validity intervals; mutable facts change objects across years,
//! popular facts never do, and new entities appear in the year they are
//! introduced and nowhere earlier.

mod corpus;
mod probes;
mod tokenizer;

pub use corpus::{render_corpus, read_documents, write_documents, Document, DocumentKind};
pub use probes::{
    gen_probes, read_probes, write_probes, ProbeCategory, ProbeExample, ProbeSplit,
};
pub use tokenizer::{pack_documents, Tokenizer, BOS, EOS, PAD, UNK};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TglError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_popular_entities: usize,
    pub n_mutable_entities: usize,
    pub n_new_entities_per_year: usize,
    pub n_relations: usize,
    /// Number of edit years after the snapshot.
    pub n_years: usize,
    /// Sentence renderings per fact (template variants, cycled).
    pub sentences_per_fact: usize,
    /// Relations asserted per entity.
    #[serde(default = "default_facts_per_entity")]
    pub facts_per_entity: usize,
    /// Relation templates; each pattern contains exactly one {S} and one {O}.
    #[serde(default)]
    pub templates: Option<Vec<RelationTemplate>>,
}

fn default_facts_per_entity() -> usize {
    2
}

impl WorldSpec {
    /// Desk-scale default: a full pipeline runs in minutes.
    pub fn desk_default(seed: u64) -> Self {
        WorldSpec {
            seed,
            n_popular_entities: 200,
            n_mutable_entities: 200,
            n_new_entities_per_year: 100,
            n_relations: 10,
            n_years: 2,
            sentences_per_fact: 3,
            facts_per_entity: 2,
            templates: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("n_popular_entities", self.n_popular_entities),
            ("n_mutable_entities", self.n_mutable_entities),
            ("n_relations", self.n_relations),
            ("n_years", self.n_years),
            ("sentences_per_fact", self.sentences_per_fact),
            ("facts_per_entity", self.facts_per_entity),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(TglError::config(format!("{name} must be positive")));
            }
        }
        let pool = self.template_pool()?;
        if self.n_relations > pool.len() {
            return Err(TglError::config(format!(
                "n_relations {} exceeds template pool size {}",
                self.n_relations,
                pool.len()
            )));
        }
        if self.facts_per_entity > self.n_relations {
            return Err(TglError::config(format!(
                "facts_per_entity {} exceeds n_relations {}",
                self.facts_per_entity, self.n_relations
            )));
        }
        for t in pool.iter().take(self.n_relations) {
            for p in &t.patterns {
                let s_slots = p.matches("{S}").count();
                let o_slots = p.matches("{O}").count();
                if s_slots != 1 || o_slots != 1 {
                    return Err(TglError::config(format!(
                        "template '{p}' must contain exactly one {{S}} and one {{O}}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn template_pool(&self) -> Result<Vec<RelationTemplate>> {
        match &self.templates {
            Some(t) if t.is_empty() => Err(TglError::config("empty template pool".to_string())),
            Some(t) => Ok(t.clone()),
            None => Ok(builtin_templates()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationTemplate {
    pub relation: String,
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Popular,
    Mutable,
    /// Introduced in the given edit year; absent from everything earlier.
    New(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entity {
    pub index: usize,
    pub name: String,
    pub kind: EntityKind,
}

/// Subject-relation-object assertion valid on `[valid_from_year,
/// valid_to_year)`; `None` means open-ended.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: String,
    pub valid_from_year: usize,
    pub valid_to_year: Option<usize>,
}

impl Fact {
    pub fn valid_at(&self, year: usize) -> bool {
        year >= self.valid_from_year && self.valid_to_year.map_or(true, |end| year < end)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub entities: Vec<Entity>,
    pub facts: Vec<Fact>,
    pub relations: Vec<RelationTemplate>,
}

impl World {
    pub fn entity(&self, index: usize) -> &Entity {
        &self.entities[index]
    }

    pub fn facts_valid_at(&self, year: usize) -> impl Iterator<Item = &Fact> {
        self.facts.iter().filter(move |f| f.valid_at(year))
    }

    pub fn facts_newly_valid_at(&self, year: usize) -> impl Iterator<Item = &Fact> {
        self.facts.iter().filter(move |f| f.valid_from_year == year)
    }

    pub fn entities_introduced_at(&self, year: usize) -> impl Iterator<Item = &Entity> {
        self.entities
            .iter()
            .filter(move |e| e.kind == EntityKind::New(year))
    }
}

/// Deterministic rng for one named generation stage.
pub(crate) fn stage_rng(seed: u64, stage: &str) -> ChaCha8Rng {
    use rand::SeedableRng;
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Build the world: entities, object pools, and time-scoped facts.
pub fn gen_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let relations: Vec<RelationTemplate> = spec
        .template_pool()?
        .into_iter()
        .take(spec.n_relations)
        .collect();
    let object_pools = build_object_pools(spec, relations.len());

    let mut entities = Vec::new();
    let mut next_index = 0;
    let mut add_entity = |kind: EntityKind, entities: &mut Vec<Entity>| {
        let e = Entity {
            index: next_index,
            name: format!("E{next_index}"),
            kind,
        };
        next_index += 1;
        entities.push(e);
    };
    for _ in 0..spec.n_popular_entities {
        add_entity(EntityKind::Popular, &mut entities);
    }
    for _ in 0..spec.n_mutable_entities {
        add_entity(EntityKind::Mutable, &mut entities);
    }
    for year in 1..=spec.n_years {
        for _ in 0..spec.n_new_entities_per_year {
            add_entity(EntityKind::New(year), &mut entities);
        }
    }

    let mut rng = stage_rng(spec.seed, "facts");
    let mut facts = Vec::new();
    for entity in &entities {
        let mut rel_ids: Vec<usize> = (0..relations.len()).collect();
        rel_ids.shuffle(&mut rng);
        rel_ids.truncate(spec.facts_per_entity);
        rel_ids.sort_unstable();
        for rel in rel_ids {
            let pool = &object_pools[rel];
            match entity.kind {
                EntityKind::Popular => {
                    let object = pool[rng.gen_range(0..pool.len())].clone();
                    facts.push(Fact {
                        subject: entity.index,
                        relation: rel,
                        object,
                        valid_from_year: 0,
                        valid_to_year: None,
                    });
                }
                EntityKind::New(intro) => {
                    let object = pool[rng.gen_range(0..pool.len())].clone();
                    facts.push(Fact {
                        subject: entity.index,
                        relation: rel,
                        object,
                        valid_from_year: intro,
                        valid_to_year: None,
                    });
                }
                EntityKind::Mutable => {
                    // Pick the years this (s, r) changes object: each edit
                    // year with probability 1/2, at least one change overall.
                    let mut change_years: Vec<usize> =
                        (1..=spec.n_years).filter(|_| rng.gen_bool(0.5)).collect();
                    if change_years.is_empty() {
                        change_years.push(rng.gen_range(1..=spec.n_years));
                    }
                    let mut start = 0usize;
                    let mut current = pool[rng.gen_range(0..pool.len())].clone();
                    for &y in &change_years {
                        facts.push(Fact {
                            subject: entity.index,
                            relation: rel,
                            object: current.clone(),
                            valid_from_year: start,
                            valid_to_year: Some(y),
                        });
                        // A changed fact gets a fresh object.
                        let mut next = pool[rng.gen_range(0..pool.len())].clone();
                        while next == current {
                            next = pool[rng.gen_range(0..pool.len())].clone();
                        }
                        current = next;
                        start = y;
                    }
                    facts.push(Fact {
                        subject: entity.index,
                        relation: rel,
                        object: current,
                        valid_from_year: start,
                        valid_to_year: None,
                    });
                }
            }
        }
    }

    Ok(World {
        spec: spec.clone(),
        entities,
        facts,
        relations,
    })
}

/// Per-relation object phrase pools, 2-4 tokens each.
fn build_object_pools(spec: &WorldSpec, n_relations: usize) -> Vec<Vec<String>> {
    let adjectives = [
        "golden", "silver", "northern", "southern", "ancient", "modern", "crimson", "azure",
        "eastern", "western", "grand", "minor", "royal", "free", "united", "hollow",
    ];
    let nouns = [
        "warden", "archive", "council", "province", "syndicate", "institute", "observatory",
        "foundry", "harbor", "citadel", "assembly", "registry", "consortium", "orchard",
        "garrison", "atelier",
    ];
    let places = [
        "Doria", "Karavel", "Veyra", "Tessin", "Ralos", "Mirenne", "Oblax", "Quillon",
        "Sarvath", "Ingmar", "Fenwick", "Ulmere",
    ];
    let mut rng = stage_rng(spec.seed, "objects");
    let per_relation = 24;
    (0..n_relations)
        .map(|_| {
            let mut pool = Vec::with_capacity(per_relation);
            while pool.len() < per_relation {
                let adj = adjectives[rng.gen_range(0..adjectives.len())];
                let noun = nouns[rng.gen_range(0..nouns.len())];
                // Answers stay 2-4 tokens so span averaging is nontrivial.
                let phrase = match rng.gen_range(0..3) {
                    0 => format!("the {adj} {noun}"),
                    1 => format!("{adj} {noun} of {}", places[rng.gen_range(0..places.len())]),
                    _ => format!("{adj} {noun}"),
                };
                if !pool.contains(&phrase) {
                    pool.push(phrase);
                }
            }
            pool
        })
        .collect()
}

fn builtin_templates() -> Vec<RelationTemplate> {
    let defs: [(&str, [&str; 3]); 12] = [
        (
            "position",
            [
                "{S} holds the position of {O} .",
                "the position of {O} is held by {S} .",
                "{S} serves as {O} .",
            ],
        ),
        (
            "employer",
            [
                "{S} is employed by {O} .",
                "{S} works for {O} .",
                "the staff of {O} includes {S} .",
            ],
        ),
        (
            "residence",
            [
                "{S} resides in {O} .",
                "{S} makes a home in {O} .",
                "the resident of {O} is {S} .",
            ],
        ),
        (
            "team",
            [
                "{S} plays for {O} .",
                "{S} competes with {O} .",
                "the roster of {O} lists {S} .",
            ],
        ),
        (
            "leadership",
            [
                "{S} leads {O} .",
                "{S} directs {O} .",
                "the head of {O} is {S} .",
            ],
        ),
        (
            "education",
            [
                "{S} studied at {O} .",
                "{S} trained at {O} .",
                "the alumni of {O} include {S} .",
            ],
        ),
        (
            "affiliation",
            [
                "{S} supports {O} .",
                "{S} backs {O} .",
                "the patron of {O} is {S} .",
            ],
        ),
        (
            "creation",
            [
                "{S} created {O} .",
                "{S} authored {O} .",
                "the maker of {O} is {S} .",
            ],
        ),
        (
            "ownership",
            [
                "{S} owns {O} .",
                "{S} acquired {O} .",
                "the owner of {O} is {S} .",
            ],
        ),
        (
            "membership",
            [
                "{S} belongs to {O} .",
                "{S} joined {O} .",
                "the members of {O} include {S} .",
            ],
        ),
        (
            "partnership",
            [
                "{S} partners with {O} .",
                "{S} allied with {O} .",
                "the partner of {O} is {S} .",
            ],
        ),
        (
            "representation",
            [
                "{S} represents {O} .",
                "{S} speaks for {O} .",
                "the delegate of {O} is {S} .",
            ],
        ),
    ];
    defs.iter()
        .map(|(name, pats)| RelationTemplate {
            relation: name.to_string(),
            patterns: pats.iter().map(|p| p.to_string()).collect(),
        })
        .collect()
}

/// Render one fact as `sentences_per_fact` sentences, cycling patterns.
pub(crate) fn render_fact(world: &World, fact: &Fact) -> Vec<String> {
    let subject = &world.entities[fact.subject].name;
    let template = &world.relations[fact.relation];
    (0..world.spec.sentences_per_fact)
        .map(|i| {
            let pattern = &template.patterns[i % template.patterns.len()];
            pattern.replace("{S}", subject).replace("{O}", &fact.object)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_world() {
        let spec = WorldSpec {
            n_popular_entities: 10,
            n_mutable_entities: 10,
            n_new_entities_per_year: 5,
            ..WorldSpec::desk_default(7)
        };
        let a = gen_world(&spec).unwrap();
        let b = gen_world(&spec).unwrap();
        assert_eq!(a.entities.len(), b.entities.len());
        for (fa, fb) in a.facts.iter().zip(&b.facts) {
            assert_eq!(fa.subject, fb.subject);
            assert_eq!(fa.object, fb.object);
            assert_eq!(fa.valid_from_year, fb.valid_from_year);
        }
    }

    #[test]
    fn zero_relations_is_config_error() {
        let mut spec = WorldSpec::desk_default(1);
        spec.n_relations = 0;
        assert!(gen_world(&spec).is_err());
    }

    #[test]
    fn mutable_facts_partition_timeline_and_change() {
        let spec = WorldSpec {
            n_popular_entities: 5,
            n_mutable_entities: 20,
            n_new_entities_per_year: 3,
            n_years: 3,
            ..WorldSpec::desk_default(13)
        };
        let world = gen_world(&spec).unwrap();
        use std::collections::BTreeMap;
        let mut by_pair: BTreeMap<(usize, usize), Vec<&Fact>> = BTreeMap::new();
        for f in &world.facts {
            if world.entities[f.subject].kind == EntityKind::Mutable {
                by_pair.entry((f.subject, f.relation)).or_default().push(f);
            }
        }
        for ((s, r), mut facts) in by_pair {
            facts.sort_by_key(|f| f.valid_from_year);
            // Every mutable (s, r) has at least one object change.
            assert!(facts.len() >= 2, "({s},{r}) never changes");
            assert_eq!(facts[0].valid_from_year, 0);
            assert_eq!(facts.last().unwrap().valid_to_year, None);
            for w in facts.windows(2) {
                assert_eq!(w[0].valid_to_year, Some(w[1].valid_from_year));
                assert_ne!(w[0].object, w[1].object, "change must alter the object");
            }
            // Exactly one fact valid at every year.
            for year in 0..=spec.n_years {
                let n = facts.iter().filter(|f| f.valid_at(year)).count();
                assert_eq!(n, 1, "({s},{r}) year {year}");
            }
        }
    }

    #[test]
    fn popular_facts_valid_everywhere() {
        let spec = WorldSpec {
            n_popular_entities: 8,
            n_mutable_entities: 4,
            n_new_entities_per_year: 2,
            ..WorldSpec::desk_default(3)
        };
        let world = gen_world(&spec).unwrap();
        for f in &world.facts {
            if world.entities[f.subject].kind == EntityKind::Popular {
                for year in 0..=spec.n_years {
                    assert!(f.valid_at(year));
                }
            }
        }
    }

    #[test]
    fn new_entities_start_at_intro_year() {
        let spec = WorldSpec {
            n_popular_entities: 4,
            n_mutable_entities: 4,
            n_new_entities_per_year: 6,
            ..WorldSpec::desk_default(5)
        };
        let world = gen_world(&spec).unwrap();
        for e in &world.entities {
            if let EntityKind::New(intro) = e.kind {
                for f in world.facts.iter().filter(|f| f.subject == e.index) {
                    assert_eq!(f.valid_from_year, intro);
                    assert!(!f.valid_at(intro - 1));
                }
            }
        }
        assert_eq!(world.entities_introduced_at(1).count(), 6);
        assert_eq!(world.entities_introduced_at(2).count(), 6);
    }

    #[test]
    fn bad_template_rejected() {
        let mut spec = WorldSpec::desk_default(1);
        spec.templates = Some(vec![RelationTemplate {
            relation: "broken".to_string(),
            patterns: vec!["{S} and {S} like {O} .".to_string()],
        }]);
        spec.n_relations = 1;
        spec.facts_per_entity = 1;
        assert!(gen_world(&spec).is_err());
    }
}
