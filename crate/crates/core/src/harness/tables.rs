//! CSV emission for plot data. Numbers are written with Rust's shortest
//! round-trip formatting, so parsing a table back yields the exact values.

use serde::{Deserialize, Serialize};

use crate::forge::SweepCell;
use crate::{Error, Result};

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}

/// Two headerless columns `original,gray`, one row per image, input order.
pub fn emit_density_data(pairs: &[(f64, f64)]) -> Result<String> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("density data needs at least one pair".into()));
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for (a, b) in pairs {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    finish(w)
}

pub fn parse_density_data(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    r.deserialize().map(|row| Ok(row?)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub prompt: String,
    pub method: String,
    pub score: f64,
}

/// Long-format `prompt,method,score` table of a `|prompts| x |methods|`
/// score matrix, prompt-major.
pub fn emit_heatmap_data(prompts: &[String], methods: &[String], scores: &[Vec<f64>]) -> Result<String> {
    if scores.len() != prompts.len() || scores.iter().any(|row| row.len() != methods.len()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} score matrix", prompts.len(), methods.len()),
            got: format!(
                "{} rows of lengths {:?}",
                scores.len(),
                scores.iter().map(Vec::len).collect::<Vec<_>>()
            ),
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for (prompt, row) in prompts.iter().zip(scores) {
        for (method, score) in methods.iter().zip(row) {
            w.serialize(HeatmapRow {
                prompt: prompt.clone(),
                method: method.clone(),
                score: *score,
            })?;
        }
    }
    finish(w)
}

pub fn parse_heatmap_data(text: &str) -> Result<Vec<HeatmapRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Generic header + rows writer for the other tables.
pub fn emit_rows<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    finish(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lower: f64,
    pub upper: f64,
    pub mean_score: Option<f64>,
    pub run_id: String,
}

impl From<&SweepCell> for SweepRow {
    fn from(c: &SweepCell) -> Self {
        Self {
            lower: c.lower,
            upper: c.upper,
            mean_score: c.mean_score,
            run_id: c.run_id.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_density_row() {
        assert_eq!(emit_density_data(&[(0.6, 0.2)]).unwrap(), "0.6,0.2\n");
        assert!(emit_density_data(&[]).is_err());
    }

    #[test]
    fn density_row_count_and_round_trip() {
        let pairs: Vec<(f64, f64)> = (0..25).map(|i| (i as f64 / 7.0, -(i as f64) / 13.0)).collect();
        let csv = emit_density_data(&pairs).unwrap();
        assert_eq!(csv.lines().count(), 25);
        assert_eq!(parse_density_data(&csv).unwrap(), pairs);
    }

    #[test]
    fn heatmap_one_cell() {
        let csv = emit_heatmap_data(&["Mona Lisa".into()], &["forged".into()], &[vec![0.709]]).unwrap();
        assert_eq!(csv, "prompt,method,score\nMona Lisa,forged,0.709\n");
    }

    #[test]
    fn heatmap_round_trip() {
        let prompts: Vec<String> = (0..10).map(|i| format!("artwork {i}, oil on canvas")).collect();
        let methods = vec!["initial".to_string(), "forged".to_string()];
        let scores: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![0.1 * i as f64 / 3.0, 1.0 / (i as f64 + 1.5)])
            .collect();
        let csv = emit_heatmap_data(&prompts, &methods, &scores).unwrap();
        let rows = parse_heatmap_data(&csv).unwrap();
        assert_eq!(rows.len(), 20);
        for (k, row) in rows.iter().enumerate() {
            let (i, j) = (k / 2, k % 2);
            assert_eq!(row.prompt, prompts[i]);
            assert_eq!(row.method, methods[j]);
            assert_eq!(row.score, scores[i][j]);
        }
    }

    #[test]
    fn heatmap_rejects_bad_dims() {
        let r = emit_heatmap_data(&["a".into(), "b".into()], &["m".into()], &[vec![0.1]]);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
        let r = emit_heatmap_data(&["a".into()], &["m".into()], &[vec![0.1, 0.2]]);
        assert!(r.is_err());
    }
}
