//! Method-comparison tables: one row per method, one column per probe
//! category, deltas against a designated baseline row.

use std::io::{BufWriter, Write};
use std::path::Path;

use super::EvalResult;
use crate::data::ProbeCategory;
use crate::error::{Result, TglError};

const COLUMNS: [ProbeCategory; 3] = [
    ProbeCategory::Popular,
    ProbeCategory::NewEntity,
    ProbeCategory::Update,
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub values: [Option<f64>; 3],
    /// value - baseline value, per column; None on the baseline row itself
    /// when it is the only row.
    pub deltas: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub year: usize,
    pub baseline_label: String,
    pub rows: Vec<ReportRow>,
    /// Column-wise minima, marked in the text rendering.
    pub best: [Option<f64>; 3],
}

/// Build a comparison over methods evaluated on one probe set.
///
/// All results must carry the same probe fingerprint; mixing probe years or
/// sets in one table is an error. `baseline` names the row deltas are taken
/// against (default: the first row).
pub fn compare_report(
    results: &[(String, EvalResult)],
    baseline: Option<&str>,
) -> Result<Report> {
    if results.is_empty() {
        return Err(TglError::eval("no results to compare".to_string()));
    }
    let fp = &results[0].1.probe_fingerprint;
    for (label, r) in results {
        if &r.probe_fingerprint != fp {
            return Err(TglError::eval(format!(
                "probe-set fingerprint mismatch: '{}' has {}, '{}' has {}",
                results[0].0, fp, label, r.probe_fingerprint
            )));
        }
    }
    let year = results[0].1.year;

    let baseline_label = baseline.unwrap_or(&results[0].0).to_string();
    let baseline_row = results
        .iter()
        .find(|(label, _)| *label == baseline_label)
        .ok_or_else(|| {
            TglError::eval(format!("baseline row '{baseline_label}' not among results"))
        })?;
    let baseline_values: [Option<f64>; 3] = column_values(&baseline_row.1);

    let mut rows = Vec::with_capacity(results.len());
    for (label, result) in results {
        let values = column_values(result);
        let mut deltas = [None; 3];
        if results.len() > 1 {
            for i in 0..3 {
                if let (Some(v), Some(b)) = (values[i], baseline_values[i]) {
                    deltas[i] = Some(v - b);
                }
            }
        }
        rows.push(ReportRow {
            label: label.clone(),
            values,
            deltas,
        });
    }

    let mut best = [None; 3];
    for i in 0..3 {
        best[i] = rows
            .iter()
            .filter_map(|r| r.values[i])
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.min(v)))
            });
    }

    Ok(Report {
        year,
        baseline_label,
        rows,
        best,
    })
}

fn column_values(result: &EvalResult) -> [Option<f64>; 3] {
    [
        result.per_category.get(COLUMNS[0]),
        result.per_category.get(COLUMNS[1]),
        result.per_category.get(COLUMNS[2]),
    ]
}

impl Report {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "method,popular,new_entity,update,delta_popular,delta_new_entity,delta_update\n",
        );
        for row in &self.rows {
            out.push_str(&row.label);
            for v in row.values {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            for d in row.deltas {
                out.push(',');
                if let Some(d) = d {
                    out.push_str(&format!("{d:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_csv_string().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    /// Aligned text table; the best (lowest) value per column is starred.
    pub fn to_text_string(&self) -> String {
        let headers = ["method", "popular", "new_entity", "update"];
        let label_width = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain([headers[0].len()])
            .max()
            .unwrap_or(8);
        let mut out = format!(
            "span perplexity, probe year {} (deltas vs '{}')\n",
            self.year, self.baseline_label
        );
        out.push_str(&format!(
            "{:<label_width$}  {:>14}  {:>14}  {:>14}\n",
            headers[0], headers[1], headers[2], headers[3]
        ));
        for row in &self.rows {
            out.push_str(&format!("{:<label_width$}", row.label));
            for (i, v) in row.values.iter().enumerate() {
                match v {
                    Some(v) => {
                        let star = if Some(*v) == self.best[i] { "*" } else { " " };
                        let delta = match row.deltas[i] {
                            Some(d) => format!(" ({d:+.2})"),
                            None => String::new(),
                        };
                        out.push_str(&format!("  {:>13}{star}", format!("{v:.2}{delta}")));
                    }
                    None => out.push_str(&format!("  {:>14}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{CategorySummary, PplAggregation};

    fn result_with(popular: f64, new_entity: f64, update: f64, fp: &str) -> EvalResult {
        EvalResult {
            year: 1,
            model_fingerprint: "model".to_string(),
            probe_fingerprint: fp.to_string(),
            aggregation: PplAggregation::ExampleMacro,
            per_category: CategorySummary {
                popular: Some(popular),
                new_entity: Some(new_entity),
                update: Some(update),
            },
            empty_categories: vec![],
            records: vec![],
            skipped: vec![],
        }
    }

    #[test]
    fn single_method_has_no_deltas() {
        let report = compare_report(
            &[("vanilla".to_string(), result_with(10.0, 20.0, 30.0, "fp"))],
            None,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.rows[0].deltas.iter().all(|d| d.is_none()));
    }

    #[test]
    fn duplicate_method_deltas_are_zero() {
        let r = result_with(10.0, 20.0, 30.0, "fp");
        let report = compare_report(
            &[
                ("vanilla".to_string(), r.clone()),
                ("vanilla-copy".to_string(), r),
            ],
            None,
        )
        .unwrap();
        for d in report.rows[1].deltas {
            assert_eq!(d, Some(0.0));
        }
        // Baseline row deltas are zero too, not absent, once rows > 1.
        for d in report.rows[0].deltas {
            assert_eq!(d, Some(0.0));
        }
    }

    #[test]
    fn fingerprint_mismatch_is_comparison_error() {
        let err = compare_report(
            &[
                ("a".to_string(), result_with(1.0, 1.0, 1.0, "fp1")),
                ("b".to_string(), result_with(1.0, 1.0, 1.0, "fp2")),
            ],
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("fingerprint"), "{err}");
    }

    #[test]
    fn renders_method_rows_with_best_marks() {
        // Shape fixture mirroring a two-row continual-vs-frozen comparison:
        // the frozen variant is better on every column.
        let rows = vec![
            (
                "continual".to_string(),
                result_with(64.13, 72.42, 83.39, "fp"),
            ),
            (
                "continual+fp".to_string(),
                result_with(57.75, 65.08, 74.55, "fp"),
            ),
        ];
        let report = compare_report(&rows, None).unwrap();
        let text = report.to_text_string();
        assert!(text.contains("continual"));
        assert!(text.contains("continual+fp"));
        assert!(text.contains("57.75"));
        assert!(text.contains('*'));
        let csv = report.to_csv_string();
        assert!(csv.starts_with("method,popular,new_entity,update"));
        assert!(csv.contains("continual+fp,57.75"));
        // Deltas match the row differences.
        assert!((report.rows[1].deltas[2].unwrap() - (74.55 - 83.39)).abs() < 1e-9);
        assert_eq!(report.best[0], Some(57.75));
    }

    #[test]
    fn named_baseline_row() {
        let rows = vec![
            ("a".to_string(), result_with(5.0, 5.0, 5.0, "fp")),
            ("b".to_string(), result_with(4.0, 6.0, 5.0, "fp")),
        ];
        let report = compare_report(&rows, Some("b")).unwrap();
        assert_eq!(report.baseline_label, "b");
        assert_eq!(report.rows[0].deltas[0], Some(1.0));
        assert!(compare_report(&rows, Some("missing")).is_err());
    }
}
