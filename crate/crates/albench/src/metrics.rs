//! Scalar run summaries: AUC of the MSE curve, batch diversity, and their
//! random-sampling-normalized forms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    /// Trapezoidal area under the per-step test-MSE curve.
    pub auc_mse: f64,
    /// Mean batch diversity over steps.
    pub div: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSummary {
    pub nauc_mse: f64,
    pub ndiv: f64,
}

/// Composite trapezoidal rule over (step, value) points.
pub fn auc_trapezoid(series: &[(f64, f64)]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::InvalidInput("AUC needs at least 2 points".into()));
    }
    if series.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidInput("steps must strictly increase".into()));
    }
    Ok(series
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum())
}

/// Mean over batch members of the distance to their nearest *other* member.
/// (The nearest-neighbor min excludes the point itself.)
pub fn batch_div(batch: &[Vec<f64>]) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::InvalidInput("diversity needs >= 2 points".into()));
    }
    let n = batch.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for j in 0..n {
            if i == j {
                continue;
            }
            let d: f64 = batch[i]
                .iter()
                .zip(&batch[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
        total += best;
    }
    Ok(total / n as f64)
}

/// Normalizes summaries against the mean of matched random-sampling runs.
pub fn normalize(
    summaries: &[CurveSummary],
    random_summaries: &[CurveSummary],
) -> Result<Vec<NormalizedSummary>> {
    if random_summaries.is_empty() {
        return Err(Error::InvalidInput("no matched random runs".into()));
    }
    let n = random_summaries.len() as f64;
    let mean_auc = random_summaries.iter().map(|s| s.auc_mse).sum::<f64>() / n;
    let mean_div = random_summaries.iter().map(|s| s.div).sum::<f64>() / n;
    if mean_auc == 0.0 || mean_div == 0.0 {
        return Err(Error::InvalidInput("degenerate random baseline".into()));
    }
    Ok(summaries
        .iter()
        .map(|s| NormalizedSummary {
            nauc_mse: s.auc_mse / mean_auc,
            ndiv: s.div / mean_div,
        })
        .collect())
}

/// Per-strategy frequency, over gamma, of problems where that gamma attains
/// the minimal mean nAUC. Ties credit the smallest gamma.
pub fn best_gamma_histogram(
    table: &[(String, String, usize, f64)],
) -> BTreeMap<String, BTreeMap<usize, usize>> {
    // (strategy, problem) -> best gamma
    let mut best: BTreeMap<(String, String), (usize, f64)> = BTreeMap::new();
    for (strategy, problem, gamma, nauc) in table {
        let key = (strategy.clone(), problem.clone());
        match best.get_mut(&key) {
            None => {
                best.insert(key, (*gamma, *nauc));
            }
            Some((g, v)) => {
                if *nauc < *v || (*nauc == *v && *gamma < *g) {
                    *g = *gamma;
                    *v = *nauc;
                }
            }
        }
    }
    let mut hist: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
    for ((strategy, _), (gamma, _)) in best {
        *hist.entry(strategy).or_default().entry(gamma).or_insert(0) += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_constant_curve() {
        let series: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, 1.0)).collect();
        assert_eq!(auc_trapezoid(&series).unwrap(), 49.0);
    }

    #[test]
    fn auc_triangle_and_two_trapezoids() {
        assert_eq!(auc_trapezoid(&[(0.0, 0.0), (1.0, 2.0)]).unwrap(), 1.0);
        assert_eq!(
            auc_trapezoid(&[(0.0, 1.0), (1.0, 3.0), (3.0, 0.0)]).unwrap(),
            5.0
        );
    }

    #[test]
    fn auc_rejects_short_or_unsorted() {
        assert!(auc_trapezoid(&[(0.0, 1.0)]).is_err());
        assert!(auc_trapezoid(&[(1.0, 1.0), (0.0, 1.0)]).is_err());
    }

    #[test]
    fn auc_is_linear() {
        let f = [(0.0, 1.0), (1.0, 4.0), (2.0, 2.0)];
        let g = [(0.0, 3.0), (1.0, 0.5), (2.0, 1.0)];
        let combo: Vec<(f64, f64)> = f
            .iter()
            .zip(&g)
            .map(|(a, b)| (a.0, 2.0 * a.1 + 3.0 * b.1))
            .collect();
        let lhs = auc_trapezoid(&combo).unwrap();
        let rhs = 2.0 * auc_trapezoid(&f).unwrap() + 3.0 * auc_trapezoid(&g).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn div_two_points_and_hand_case() {
        assert_eq!(batch_div(&[vec![0.0], vec![3.0]]).unwrap(), 3.0);
        // {0, 1, 3}: nearest-other distances 1, 1, 2.
        let d = batch_div(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        assert!((d - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(batch_div(&[vec![2.0], vec![2.0]]).unwrap(), 0.0);
        assert!(batch_div(&[vec![1.0]]).is_err());
    }

    #[test]
    fn div_translation_invariant_and_scales_linearly() {
        let batch = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![5.0, 0.5]];
        let base = batch_div(&batch).unwrap();
        let shifted: Vec<Vec<f64>> = batch
            .iter()
            .map(|p| p.iter().map(|v| v + 7.5).collect())
            .collect();
        let scaled: Vec<Vec<f64>> = batch
            .iter()
            .map(|p| p.iter().map(|v| v * 3.0).collect())
            .collect();
        assert!((batch_div(&shifted).unwrap() - base).abs() < 1e-12);
        assert!((batch_div(&scaled).unwrap() - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn normalize_hand_cases() {
        let random = vec![
            CurveSummary { auc_mse: 2.0, div: 1.0 },
            CurveSummary { auc_mse: 3.0, div: 1.0 },
            CurveSummary { auc_mse: 4.0, div: 1.0 },
        ];
        let method = vec![CurveSummary { auc_mse: 1.5, div: 2.0 }];
        let normed = normalize(&method, &random).unwrap();
        assert!((normed[0].nauc_mse - 0.5).abs() < 1e-15);
        assert!((normed[0].ndiv - 2.0).abs() < 1e-15);
        // Random normalized against itself aggregates to exactly 1.
        let self_normed = normalize(&random, &random).unwrap();
        let mean: f64 = self_normed.iter().map(|s| s.nauc_mse).sum::<f64>() / 3.0;
        assert!((mean - 1.0).abs() < 1e-15);
    }

    #[test]
    fn histogram_tie_goes_to_smallest_gamma() {
        let table = vec![
            ("gsx".to_string(), "sine".to_string(), 2, 0.5),
            ("gsx".to_string(), "sine".to_string(), 8, 0.5),
            ("gsx".to_string(), "bess".to_string(), 8, 0.4),
            ("gsx".to_string(), "bess".to_string(), 2, 0.9),
        ];
        let hist = best_gamma_histogram(&table);
        let gsx = &hist["gsx"];
        assert_eq!(gsx[&2], 1); // sine tie -> gamma 2
        assert_eq!(gsx[&8], 1); // bess strict winner
        assert_eq!(gsx.values().sum::<usize>(), 2);
    }

    #[test]
    fn histogram_single_strict_minimum() {
        let table = vec![
            ("qbc".to_string(), "sine".to_string(), 2, 0.9),
            ("qbc".to_string(), "sine".to_string(), 8, 0.3),
            ("qbc".to_string(), "sine".to_string(), 64, 1.2),
        ];
        let hist = best_gamma_histogram(&table);
        assert_eq!(hist["qbc"][&8], 1);
        assert_eq!(hist["qbc"].len(), 1);
    }
}
