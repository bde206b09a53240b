//! Salient-span perplexity over probe sets and per-category aggregation.

mod report;

pub use report::{compare_report, Report, ReportRow};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ProbeCategory, ProbeExample, Tokenizer, BOS};
use crate::error::{Result, TglError};
use crate::model::{Model, Span};
use crate::tensor::Element;

/// Macro averages per example; the token-micro alternative pools tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplAggregation {
    #[default]
    ExampleMacro,
    TokenMicro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub id: String,
    pub category: ProbeCategory,
    /// Mean per-token NLL over the answer span, natural log.
    pub span_nll: f64,
    pub span_len: usize,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedProbe {
    pub id: String,
    pub reason: String,
}

/// Mean span perplexity per category; absent when no example scored.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CategorySummary {
    pub popular: Option<f64>,
    pub new_entity: Option<f64>,
    pub update: Option<f64>,
}

impl CategorySummary {
    pub fn get(&self, category: ProbeCategory) -> Option<f64> {
        match category {
            ProbeCategory::Popular => self.popular,
            ProbeCategory::NewEntity => self.new_entity,
            ProbeCategory::Update => self.update,
        }
    }

    fn set(&mut self, category: ProbeCategory, value: f64) {
        match category {
            ProbeCategory::Popular => self.popular = Some(value),
            ProbeCategory::NewEntity => self.new_entity = Some(value),
            ProbeCategory::Update => self.update = Some(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub year: usize,
    pub model_fingerprint: String,
    pub probe_fingerprint: String,
    pub aggregation: PplAggregation,
    pub per_category: CategorySummary,
    /// Categories that ended up with zero scoreable examples.
    pub empty_categories: Vec<ProbeCategory>,
    pub records: Vec<ProbeScore>,
    pub skipped: Vec<SkippedProbe>,
}

impl EvalResult {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), json + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())
            .map_err(|e| TglError::eval(format!("cannot open {}: {e}", path.as_ref().display())))?;
        serde_json::from_slice(&bytes).map_err(|e| TglError::eval(format!("bad eval file: {e}")))
    }
}

/// Content hash of a probe set (ids, contexts, answers, in order).
pub fn probe_fingerprint(probes: &[ProbeExample]) -> String {
    let mut buf = String::new();
    for p in probes {
        buf.push_str(&p.id);
        buf.push('\x1f');
        buf.push_str(&p.left_context);
        buf.push('\x1f');
        buf.push_str(&p.answer);
        buf.push('\n');
    }
    crate::fingerprint::fingerprint_bytes(buf.as_bytes())
}

/// Encode a probe for scoring: `<bos> context answer`, span over the answer.
pub fn encode_probe(
    tokenizer: &Tokenizer,
    probe: &ProbeExample,
) -> Result<(Vec<usize>, Span)> {
    let mut tokens = vec![BOS];
    tokens.extend(tokenizer.encode(&probe.left_context));
    let start = tokens.len();
    tokens.extend(tokenizer.encode(&probe.answer));
    if start == 1 {
        return Err(TglError::eval(format!(
            "probe {} has empty encoded context",
            probe.id
        )));
    }
    if tokens.len() == start {
        return Err(TglError::eval(format!(
            "probe {} has empty encoded answer",
            probe.id
        )));
    }
    let end = tokens.len();
    Ok((tokens, Span::new(start, end)))
}

/// Teacher-forced NLL over the answer tokens given the left context.
/// Returns per-token NLLs and the span perplexity `exp(mean NLL)`.
pub fn span_perplexity<T: Element>(
    model: &Model<T>,
    tokenizer: &Tokenizer,
    probe: &ProbeExample,
) -> Result<(Vec<f64>, f64)> {
    let (tokens, span) = encode_probe(tokenizer, probe)?;
    if tokens.len() > model.config().context_length {
        return Err(TglError::eval(format!(
            "probe {} needs {} tokens, context_length is {}",
            probe.id,
            tokens.len(),
            model.config().context_length
        )));
    }
    let nlls = model.span_token_nlls(&tokens, span)?;
    let mean = nlls.iter().sum::<f64>() / nlls.len() as f64;
    Ok((nlls, mean.exp()))
}

/// Score a probe set. Overlong probes are skipped with a logged reason; the
/// skip criterion depends only on the probe and the context length, so
/// comparisons across models of one config stay paired.
pub fn evaluate<T: Element>(
    model: &Model<T>,
    tokenizer: &Tokenizer,
    probes: &[ProbeExample],
    aggregation: PplAggregation,
) -> Result<EvalResult> {
    if probes.is_empty() {
        return Err(TglError::eval("empty probe set".to_string()));
    }
    let mut sorted: Vec<&ProbeExample> = probes.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let year = sorted.iter().map(|p| p.year).max().unwrap_or(0);
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for probe in sorted {
        let (tokens, span) = encode_probe(tokenizer, probe)?;
        if tokens.len() > model.config().context_length {
            skipped.push(SkippedProbe {
                id: probe.id.clone(),
                reason: format!(
                    "overlong: {} tokens vs context_length {}",
                    tokens.len(),
                    model.config().context_length
                ),
            });
            continue;
        }
        let nlls = model.span_token_nlls(&tokens, span)?;
        let mean = nlls.iter().sum::<f64>() / nlls.len() as f64;
        records.push(ProbeScore {
            id: probe.id.clone(),
            category: probe.category,
            span_nll: mean,
            span_len: nlls.len(),
            perplexity: mean.exp(),
        });
    }

    let per_category = aggregate(&records, aggregation);
    let empty_categories = ProbeCategory::ALL
        .into_iter()
        .filter(|c| {
            probes.iter().any(|p| p.category == *c) && per_category.get(*c).is_none()
        })
        .collect();

    Ok(EvalResult {
        year,
        model_fingerprint: model.fingerprint(),
        probe_fingerprint: probe_fingerprint(probes),
        aggregation,
        per_category,
        empty_categories,
        records,
        skipped,
    })
}

/// Per-category perplexity from scored records.
pub fn aggregate(records: &[ProbeScore], aggregation: PplAggregation) -> CategorySummary {
    let mut summary = CategorySummary::default();
    let mut grouped: BTreeMap<ProbeCategory, Vec<&ProbeScore>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.category).or_default().push(r);
    }
    for (category, rs) in grouped {
        let value = match aggregation {
            PplAggregation::ExampleMacro => {
                let mean_nll = rs.iter().map(|r| r.span_nll).sum::<f64>() / rs.len() as f64;
                mean_nll.exp()
            }
            PplAggregation::TokenMicro => {
                let total_nll: f64 = rs.iter().map(|r| r.span_nll * r.span_len as f64).sum();
                let total_len: usize = rs.iter().map(|r| r.span_len).sum();
                (total_nll / total_len as f64).exp()
            }
        };
        summary.set(category, value);
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ProbeSplit, Tokenizer};
    use crate::model::ModelConfig;

    fn fixture() -> (Model<f64>, Tokenizer, ProbeExample) {
        let tok = Tokenizer::build(
            ["E1 holds the position of grand warden", "E2 owns the hollow archive"].into_iter(),
        )
        .unwrap();
        let model = Model::init(ModelConfig {
            vocab_size: tok.vocab_size(),
            context_length: 32,
            n_blocks: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            tie_embeddings: true,
            seed: 1,
            lora: None,
        })
        .unwrap();
        let probe = ProbeExample {
            id: "p0".to_string(),
            year: 1,
            category: ProbeCategory::Update,
            split: ProbeSplit::Test,
            left_context: "E1 holds the position of".to_string(),
            answer: "grand warden".to_string(),
        };
        (model, tok, probe)
    }

    #[test]
    fn known_token_probs_give_exact_perplexity() {
        // Answer token probabilities {0.5, 0.125}: mean NLL = ln 4 -> ppl 4.
        let records = [ProbeScore {
            id: "a".to_string(),
            category: ProbeCategory::Update,
            span_nll: (2.0f64.ln() + 8.0f64.ln()) / 2.0,
            span_len: 2,
            perplexity: 4.0,
        }];
        let summary = aggregate(&records, PplAggregation::ExampleMacro);
        assert!((summary.update.unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_example_leaves_macro_mean_unchanged() {
        let one = ProbeScore {
            id: "a".to_string(),
            category: ProbeCategory::Popular,
            span_nll: 1.3,
            span_len: 3,
            perplexity: 1.3f64.exp(),
        };
        let single = aggregate(&[one.clone()], PplAggregation::ExampleMacro);
        let doubled = aggregate(&[one.clone(), one], PplAggregation::ExampleMacro);
        assert_eq!(single.popular, doubled.popular);
    }

    #[test]
    fn raising_nll_raises_perplexity() {
        let base: Vec<ProbeScore> = (0..4)
            .map(|i| ProbeScore {
                id: format!("p{i}"),
                category: ProbeCategory::NewEntity,
                span_nll: 1.0 + 0.1 * i as f64,
                span_len: 2,
                perplexity: 0.0,
            })
            .collect();
        let bumped: Vec<ProbeScore> = base
            .iter()
            .cloned()
            .map(|mut r| {
                r.span_nll += 0.05;
                r
            })
            .collect();
        let a = aggregate(&base, PplAggregation::ExampleMacro);
        let b = aggregate(&bumped, PplAggregation::ExampleMacro);
        assert!(b.new_entity.unwrap() > a.new_entity.unwrap());
    }

    #[test]
    fn span_perplexity_consistent_with_model_losses() {
        let (model, tok, probe) = fixture();
        let (nlls, ppl) = span_perplexity(&model, &tok, &probe).unwrap();
        assert_eq!(nlls.len(), 2);
        let mean = nlls.iter().sum::<f64>() / 2.0;
        assert!((ppl - mean.exp()).abs() < 1e-12);
        // Identical model evaluated twice gives identical results (purity).
        let (nlls2, ppl2) = span_perplexity(&model, &tok, &probe).unwrap();
        assert_eq!(nlls, nlls2);
        assert_eq!(ppl, ppl2);
    }

    #[test]
    fn evaluate_skips_overlong_with_reason() {
        let (model, tok, probe) = fixture();
        let mut long = probe.clone();
        long.id = "p_long".to_string();
        long.left_context = vec!["E1"; 40].join(" ");
        let result = evaluate(
            &model,
            &tok,
            &[probe.clone(), long],
            PplAggregation::ExampleMacro,
        )
        .unwrap();
        assert_eq!(result.records.len(), 1);
        assert_eq!(result.skipped.len(), 1);
        assert!(result.skipped[0].reason.contains("overlong"));
        assert!(result.per_category.update.is_some());
    }

    #[test]
    fn evaluate_identical_models_equal_and_subset_matches() {
        let (model, tok, probe) = fixture();
        let mut second = probe.clone();
        second.id = "p1".to_string();
        second.category = ProbeCategory::Popular;
        second.left_context = "E2 owns".to_string();
        second.answer = "the hollow archive".to_string();
        let probes = vec![probe.clone(), second.clone()];
        let a = evaluate(&model, &tok, &probes, PplAggregation::ExampleMacro).unwrap();
        let b = evaluate(&model, &tok, &probes, PplAggregation::ExampleMacro).unwrap();
        assert_eq!(a, b);
        // Single-category subset reproduces that category's value.
        let only_update = evaluate(&model, &tok, &[probe], PplAggregation::ExampleMacro).unwrap();
        assert_eq!(only_update.per_category.update, a.per_category.update);
    }

    #[test]
    fn eval_result_json_roundtrip() {
        let (model, tok, probe) = fixture();
        let result = evaluate(&model, &tok, &[probe], PplAggregation::ExampleMacro).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.json");
        result.save(&path).unwrap();
        let back = EvalResult::load(&path).unwrap();
        assert_eq!(result, back);
    }
}
