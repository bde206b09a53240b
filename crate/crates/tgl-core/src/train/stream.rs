//! Replay stream construction for the MixReview baseline.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{stage_rng, Document};
use crate::error::{Result, TglError};

/// Interleave current edit documents with replayed documents from a
/// previously seen pool at `ratio` replay docs per edit doc.
///
/// The stream contains every edit document exactly once plus
/// `round(ratio * |edits|)` pool documents drawn uniformly with replacement,
/// shuffled deterministically by `seed`.
pub fn mixreview_stream(
    edits: &[Document],
    pool: &[Document],
    ratio: f64,
    seed: u64,
) -> Result<Vec<Document>> {
    if ratio < 0.0 || !ratio.is_finite() {
        return Err(TglError::Train(format!("invalid replay ratio {ratio}")));
    }
    if edits.is_empty() {
        return Err(TglError::Train("empty edit corpus".to_string()));
    }
    let n_replay = (ratio * edits.len() as f64).round() as usize;
    if n_replay > 0 && pool.is_empty() {
        return Err(TglError::Train(
            "replay ratio > 0 with an empty replay pool".to_string(),
        ));
    }
    let mut rng = stage_rng(seed, "mixreview");
    let mut stream: Vec<Document> = edits.to_vec();
    for _ in 0..n_replay {
        stream.push(pool[rng.gen_range(0..pool.len())].clone());
    }
    stream.shuffle(&mut rng);
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DocumentKind;
    use std::collections::BTreeMap;

    fn docs(prefix: &str, n: usize, kind: DocumentKind) -> Vec<Document> {
        (0..n)
            .map(|i| Document {
                id: format!("{prefix}{i}"),
                year: 1,
                kind,
                text: format!("text {i}"),
            })
            .collect()
    }

    #[test]
    fn two_to_one_ratio_sizes() {
        let edits = docs("e", 100, DocumentKind::Edit);
        let pool = docs("p", 50, DocumentKind::Snapshot);
        let stream = mixreview_stream(&edits, &pool, 2.0, 7).unwrap();
        assert_eq!(stream.len(), 300);
        let replay = stream.iter().filter(|d| d.id.starts_with('p')).count();
        assert_eq!(replay, 200);
    }

    #[test]
    fn edits_appear_exactly_once() {
        let edits = docs("e", 40, DocumentKind::Edit);
        let pool = docs("p", 10, DocumentKind::Snapshot);
        let stream = mixreview_stream(&edits, &pool, 1.5, 3).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for d in &stream {
            if d.id.starts_with('e') {
                *counts.entry(d.id.as_str()).or_insert(0) += 1;
            }
        }
        assert_eq!(counts.len(), 40);
        assert!(counts.values().all(|&c| c == 1));
        // round(1.5 * 40) = 60 replay docs.
        assert_eq!(stream.len(), 100);
    }

    #[test]
    fn ratio_zero_is_shuffled_edits_only() {
        let edits = docs("e", 25, DocumentKind::Edit);
        let stream = mixreview_stream(&edits, &[], 0.0, 11).unwrap();
        assert_eq!(stream.len(), 25);
        let mut ids: Vec<&str> = stream.iter().map(|d| d.id.as_str()).collect();
        ids.sort_unstable();
        let mut want: Vec<String> = (0..25).map(|i| format!("e{i}")).collect();
        want.sort();
        assert_eq!(ids, want.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    }

    #[test]
    fn empty_pool_with_positive_ratio_is_error() {
        let edits = docs("e", 10, DocumentKind::Edit);
        assert!(mixreview_stream(&edits, &[], 2.0, 1).is_err());
    }

    #[test]
    fn small_pool_draws_with_replacement_binomially() {
        // 100 edits at ratio 2 over a pool of 10: 200 draws, expected 20 per
        // doc, sd = sqrt(200 * 0.1 * 0.9) ~ 4.24; require within 3 sigma.
        let edits = docs("e", 100, DocumentKind::Edit);
        let pool = docs("p", 10, DocumentKind::Snapshot);
        let stream = mixreview_stream(&edits, &pool, 2.0, 99).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for d in stream.iter().filter(|d| d.id.starts_with('p')) {
            *counts.entry(d.id.as_str()).or_insert(0) += 1;
        }
        assert_eq!(counts.values().sum::<usize>(), 200);
        let sigma = (200.0f64 * 0.1 * 0.9).sqrt();
        for (id, &c) in &counts {
            let dev = (c as f64 - 20.0).abs();
            assert!(dev <= 3.0 * sigma, "{id} drawn {c} times");
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let edits = docs("e", 30, DocumentKind::Edit);
        let pool = docs("p", 5, DocumentKind::Snapshot);
        let a = mixreview_stream(&edits, &pool, 2.0, 42).unwrap();
        let b = mixreview_stream(&edits, &pool, 2.0, 42).unwrap();
        assert_eq!(a, b);
        let c = mixreview_stream(&edits, &pool, 2.0, 43).unwrap();
        assert_ne!(a, c);
    }
}
