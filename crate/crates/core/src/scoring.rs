//! Speed/accuracy composite scoring over (weighted F1, FPS) rows:
//! joint min-max normalization into [a, b], the convex-combination score at
//! several lambda weights, and the exponential-in-F1 score.

use serde::Serialize;

use crate::error::MetricsError;

/// One model's published operating point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub model_name: String,
    pub weighted_f1: f64,
    pub fps: f64,
}

/// Constants of the scoring scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    /// Squeeze range lower end of the min-max normalization.
    pub a: f64,
    /// Squeeze range upper end.
    pub b: f64,
    /// Normalization constant of the exponential score.
    pub c: f64,
    /// Multiplier applied to weighted F1 inside the exponent. The published
    /// score table is only reproducible with 2^(100*F1), not 2^F1, so the
    /// scale is explicit and defaults to 100.
    pub f1_exponent_scale: f64,
    /// Lambda weights evaluated per row: (column label, lambda).
    pub lambdas: Vec<(String, f64)>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            a: 0.1,
            b: 1.0,
            c: 1e27,
            f1_exponent_scale: 100.0,
            lambdas: vec![
                ("Balance".into(), 0.5),
                ("Prioritize WF1".into(), 0.7),
                ("Prioritize FPS".into(), 0.3),
            ],
        }
    }
}

impl ScoringConfig {
    fn validate(&self) -> Result<(), MetricsError> {
        if self.a >= self.b {
            return Err(MetricsError::Config(format!(
                "squeeze range requires a < b, got a={} b={}",
                self.a, self.b
            )));
        }
        if self.c <= 0.0 {
            return Err(MetricsError::Config(format!("C must be positive, got {}", self.c)));
        }
        for (_, l) in &self.lambdas {
            if !(0.0..=1.0).contains(l) {
                return Err(MetricsError::Config(format!("lambda {} outside [0,1]", l)));
            }
        }
        Ok(())
    }
}

/// Affine min-max squeeze of `values` into `[a, b]`. Errors when all values
/// are equal (the mapping is undefined at max == min).
pub fn normalize_minmax(values: &[f64], a: f64, b: f64) -> Result<Vec<f64>, MetricsError> {
    if values.len() < 2 {
        return Err(MetricsError::EmptyInput(
            "min-max normalization needs at least two values".into(),
        ));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(MetricsError::DegenerateRange(format!("all values equal {}", lo)));
    }
    Ok(values
        .iter()
        .map(|&x| (b - a) * (x - lo) / (hi - lo) + a)
        .collect())
}

/// Convex combination of the normalized columns under weight `lambda`.
pub fn score1(f1_norm: f64, fps_norm: f64, lambda: f64) -> f64 {
    lambda * f1_norm + (1.0 - lambda) * fps_norm
}

/// Exponential-in-F1 score: `2^(scale * weighted_f1) * fps / c`.
pub fn score2(weighted_f1: f64, fps: f64, config: &ScoringConfig) -> f64 {
    (config.f1_exponent_scale * weighted_f1).exp2() * fps / config.c
}

/// One scored row of the output table.
#[derive(Debug, Clone, Serialize)]
pub struct ScoredRow {
    pub model_name: String,
    pub weighted_f1: f64,
    pub fps: f64,
    pub f1_norm: f64,
    pub fps_norm: f64,
    /// Score1 values, one per configured lambda, in configuration order.
    pub score1: Vec<f64>,
    pub score2: f64,
}

/// The full score table.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreTable {
    pub lambda_labels: Vec<String>,
    pub lambdas: Vec<f64>,
    pub rows: Vec<ScoredRow>,
}

/// Column selector for [`ScoreTable::sorted_by`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreColumn {
    WeightedF1,
    Fps,
    Score1(usize),
    Score2,
}

impl ScoreTable {
    /// Rows in descending order of the requested column.
    pub fn sorted_by(&self, column: ScoreColumn) -> Vec<&ScoredRow> {
        let mut rows: Vec<&ScoredRow> = self.rows.iter().collect();
        rows.sort_by(|x, y| {
            let key = |r: &ScoredRow| match column {
                ScoreColumn::WeightedF1 => r.weighted_f1,
                ScoreColumn::Fps => r.fps,
                ScoreColumn::Score1(i) => r.score1[i],
                ScoreColumn::Score2 => r.score2,
            };
            key(y).partial_cmp(&key(x)).expect("finite scores")
        });
        rows
    }

    /// Tab-separated table with 3-decimal rendering.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("model\tweighted_f1\tfps");
        for label in &self.lambda_labels {
            out.push('\t');
            out.push_str(label);
        }
        out.push_str("\tscore2\n");
        for row in &self.rows {
            out.push_str(&format!("{}\t{:.3}\t{:.2}", row.model_name, row.weighted_f1, row.fps));
            for s in &row.score1 {
                out.push_str(&format!("\t{:.3}", s));
            }
            out.push_str(&format!("\t{:.3}\n", row.score2));
        }
        out
    }

    /// Structured form for machine consumption.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable table")
    }
}

/// Normalize the WF1 and FPS columns jointly across all rows, then evaluate
/// Score1 at every configured lambda and Score2 per row.
pub fn build_score_table(rows: &[ScoreRow], config: &ScoringConfig) -> Result<ScoreTable, MetricsError> {
    config.validate()?;
    if rows.len() < 2 {
        return Err(MetricsError::EmptyInput(format!(
            "score table needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    for row in rows {
        if !(0.0..=1.0).contains(&row.weighted_f1) {
            return Err(MetricsError::Contract(format!(
                "weighted F1 {} of '{}' outside [0,1]",
                row.weighted_f1, row.model_name
            )));
        }
        if row.fps <= 0.0 {
            return Err(MetricsError::Contract(format!(
                "FPS {} of '{}' not positive",
                row.fps, row.model_name
            )));
        }
    }
    let f1s: Vec<f64> = rows.iter().map(|r| r.weighted_f1).collect();
    let fpss: Vec<f64> = rows.iter().map(|r| r.fps).collect();
    let f1_norm = normalize_minmax(&f1s, config.a, config.b)
        .map_err(|_| MetricsError::DegenerateRange("weighted_f1".into()))?;
    let fps_norm = normalize_minmax(&fpss, config.a, config.b)
        .map_err(|_| MetricsError::DegenerateRange("fps".into()))?;

    let scored = rows
        .iter()
        .enumerate()
        .map(|(i, row)| ScoredRow {
            model_name: row.model_name.clone(),
            weighted_f1: row.weighted_f1,
            fps: row.fps,
            f1_norm: f1_norm[i],
            fps_norm: fps_norm[i],
            score1: config
                .lambdas
                .iter()
                .map(|(_, l)| score1(f1_norm[i], fps_norm[i], *l))
                .collect(),
            score2: score2(row.weighted_f1, row.fps, config),
        })
        .collect();

    Ok(ScoreTable {
        lambda_labels: config.lambdas.iter().map(|(n, _)| n.clone()).collect(),
        lambdas: config.lambdas.iter().map(|(_, l)| *l).collect(),
        rows: scored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_normalization() {
        assert_eq!(normalize_minmax(&[0.0, 1.0], 0.1, 1.0).unwrap(), vec![0.1, 1.0]);
    }

    #[test]
    fn degenerate_range_is_an_error() {
        assert!(matches!(
            normalize_minmax(&[0.4, 0.4], 0.1, 1.0).unwrap_err(),
            MetricsError::DegenerateRange(_)
        ));
    }

    #[test]
    fn score1_endpoints() {
        assert_eq!(score1(0.8, 0.3, 1.0), 0.8);
        assert_eq!(score1(0.8, 0.3, 0.0), 0.3);
    }

    #[test]
    fn score2_zero_f1_is_fps_over_c() {
        let config = ScoringConfig::default();
        assert_eq!(score2(0.0, 42.0, &config), 42.0 / 1e27);
    }

    #[test]
    fn score2_ordering_invariant_to_c() {
        let mut a = ScoringConfig::default();
        let mut b = ScoringConfig::default();
        a.c = 1e27;
        b.c = 3.7;
        let pairs = [(0.91, 50.0), (0.93, 20.0), (0.85, 180.0)];
        let order = |cfg: &ScoringConfig| {
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            idx.sort_by(|&i, &j| {
                score2(pairs[j].0, pairs[j].1, cfg)
                    .partial_cmp(&score2(pairs[i].0, pairs[i].1, cfg))
                    .unwrap()
            });
            idx
        };
        assert_eq!(order(&a), order(&b));
    }

    #[test]
    fn table_needs_two_rows_and_nondegenerate_columns() {
        let config = ScoringConfig::default();
        let single = vec![ScoreRow {
            model_name: "only".into(),
            weighted_f1: 0.9,
            fps: 10.0,
        }];
        assert!(matches!(
            build_score_table(&single, &config).unwrap_err(),
            MetricsError::EmptyInput(_)
        ));

        let duplicated = vec![
            ScoreRow {
                model_name: "a".into(),
                weighted_f1: 0.9,
                fps: 10.0,
            },
            ScoreRow {
                model_name: "b".into(),
                weighted_f1: 0.9,
                fps: 20.0,
            },
        ];
        assert!(matches!(
            build_score_table(&duplicated, &config).unwrap_err(),
            MetricsError::DegenerateRange(_)
        ));
    }

    #[test]
    fn score1_monotone_in_both_inputs() {
        for lambda in [0.25, 0.5, 0.75] {
            assert!(score1(0.6, 0.4, lambda) < score1(0.7, 0.4, lambda));
            assert!(score1(0.6, 0.4, lambda) < score1(0.6, 0.5, lambda));
        }
    }

    #[test]
    fn normalization_invariant_under_positive_affine_rescale() {
        let fps = [26.07, 33.42, 89.09, 183.08];
        let rescaled: Vec<f64> = fps.iter().map(|&x| 3.5 * x + 11.0).collect();
        let a = normalize_minmax(&fps, 0.1, 1.0).unwrap();
        let b = normalize_minmax(&rescaled, 0.1, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
