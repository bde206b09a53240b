//! Document rendering and JSONL corpus files.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{render_fact, World};
use crate::error::{Result, TglError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentKind {
    Snapshot,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub year: usize,
    pub kind: DocumentKind,
    pub text: String,
}

/// Render the corpus for one year.
///
/// Snapshot renders every fact valid at year 0; Edit(t) renders exactly the
/// delta: facts newly valid in year t, which covers both changed relations
/// and the facts of entities introduced in year t.
pub fn render_corpus(world: &World, year: usize, kind: DocumentKind) -> Result<Vec<Document>> {
    match kind {
        DocumentKind::Snapshot => {
            if year != 0 {
                return Err(TglError::input(format!(
                    "snapshot is year 0, got year {year}"
                )));
            }
        }
        DocumentKind::Edit => {
            if year == 0 {
                return Err(TglError::input(
                    "edit corpus needs a predecessor year; year 0 has none".to_string(),
                ));
            }
            if year > world.spec.n_years {
                return Err(TglError::input(format!(
                    "edit year {year} out of range, world has {} edit years",
                    world.spec.n_years
                )));
            }
        }
    }

    let mut by_subject: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    match kind {
        DocumentKind::Snapshot => {
            for fact in world.facts_valid_at(0) {
                by_subject
                    .entry(fact.subject)
                    .or_default()
                    .extend(render_fact(world, fact));
            }
        }
        DocumentKind::Edit => {
            for fact in world.facts_newly_valid_at(year) {
                by_subject
                    .entry(fact.subject)
                    .or_default()
                    .extend(render_fact(world, fact));
            }
        }
    }

    let prefix = match kind {
        DocumentKind::Snapshot => "snap".to_string(),
        DocumentKind::Edit => format!("edit_y{year}"),
    };
    Ok(by_subject
        .into_iter()
        .map(|(subject, sentences)| Document {
            id: format!("{prefix}_{}", world.entities[subject].name),
            year,
            kind,
            text: sentences.join(" "),
        })
        .collect())
}

pub fn write_documents(docs: &[Document], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    for doc in docs {
        serde_json::to_writer(&mut w, doc)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_documents(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| TglError::data(format!("cannot open {}: {e}", path.as_ref().display())))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| TglError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_world, EntityKind, WorldSpec};

    fn small_world() -> crate::data::World {
        gen_world(&WorldSpec {
            n_popular_entities: 6,
            n_mutable_entities: 8,
            n_new_entities_per_year: 4,
            ..WorldSpec::desk_default(17)
        })
        .unwrap()
    }

    #[test]
    fn edit_year_zero_rejected() {
        let world = small_world();
        assert!(render_corpus(&world, 0, DocumentKind::Edit).is_err());
        assert!(render_corpus(&world, 1, DocumentKind::Snapshot).is_err());
    }

    #[test]
    fn new_entities_absent_from_snapshot() {
        let world = small_world();
        let snapshot = render_corpus(&world, 0, DocumentKind::Snapshot).unwrap();
        let snap_text: String = snapshot
            .iter()
            .map(|d| d.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        for e in &world.entities {
            if matches!(e.kind, EntityKind::New(_)) {
                assert!(
                    !snap_text.split_whitespace().any(|w| w == e.name),
                    "{} leaked into snapshot",
                    e.name
                );
            }
        }
    }

    #[test]
    fn edit_docs_cover_exactly_the_delta() {
        let world = small_world();
        let edits = render_corpus(&world, 1, DocumentKind::Edit).unwrap();
        // Every newly valid fact's object appears in year-1 edits.
        let text: String = edits
            .iter()
            .map(|d| d.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        for fact in world.facts_newly_valid_at(1) {
            assert!(
                text.contains(&fact.object),
                "object '{}' missing from edits",
                fact.object
            );
        }
        // No document for subjects without changes.
        for doc in &edits {
            assert_eq!(doc.kind, DocumentKind::Edit);
            assert_eq!(doc.year, 1);
        }
    }

    #[test]
    fn edits_are_smaller_than_snapshot() {
        let world = gen_world(&WorldSpec::desk_default(23)).unwrap();
        let snapshot = render_corpus(&world, 0, DocumentKind::Snapshot).unwrap();
        let count = |docs: &[Document]| -> usize {
            docs.iter()
                .map(|d| d.text.split_whitespace().count())
                .sum()
        };
        let snap_tokens = count(&snapshot);
        for year in 1..=world.spec.n_years {
            let edits = render_corpus(&world, year, DocumentKind::Edit).unwrap();
            assert!(
                count(&edits) < snap_tokens,
                "edit year {year} not smaller than snapshot"
            );
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let world = small_world();
        let docs = render_corpus(&world, 1, DocumentKind::Edit).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.jsonl");
        write_documents(&docs, &path).unwrap();
        let back = read_documents(&path).unwrap();
        assert_eq!(docs, back);
    }

    #[test]
    fn malformed_jsonl_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"year\":0,\"kind\":\"snapshot\",\"text\":\"x\"}\nnot json\n").unwrap();
        let err = read_documents(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
