use super::MetricsError;

/// Spreads below this fraction of the largest magnitude count as rounding
/// noise.
pub const NORMALIZE_REL_TOL: f64 = 1e-12;

/// Min-max normalization into `[0, 1]`. A constant column, or one whose
/// spread is within [`NORMALIZE_REL_TOL`] of its magnitude, maps to 0.5.
pub fn normalize(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let flat = !(range > NORMALIZE_REL_TOL * lo.abs().max(hi.abs()));
    values
        .iter()
        .map(|&v| {
            if flat {
                0.5
            } else if higher_is_better {
                (v - lo) / range
            } else {
                (hi - v) / range
            }
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_std(xs: &[f64], m: f64) -> f64 {
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// CRITIC weights of the columns of `rows` (routes × indicators).
///
/// `c_j = σ_j · Σ_k (1 − |r_jk|)` with population standard deviation and
/// Pearson correlation; correlations involving a constant column are taken
/// as zero. Weights are `c_j / Σ c`, or uniform when every `c` is zero.
pub fn critic_weights(rows: &[Vec<f64>]) -> Result<Vec<f64>, MetricsError> {
    if rows.len() < 2 {
        return Err(MetricsError::TooFewRoutes(rows.len()));
    }
    let m = rows[0].len();
    if rows.iter().any(|r| r.len() != m) {
        return Err(MetricsError::Ragged);
    }
    let cols: Vec<Vec<f64>> = (0..m)
        .map(|j| rows.iter().map(|r| r[j]).collect())
        .collect();
    let means: Vec<f64> = cols.iter().map(|c| mean(c)).collect();
    let stds: Vec<f64> = cols
        .iter()
        .zip(&means)
        .map(|(c, &mu)| population_std(c, mu))
        .collect();
    let n = rows.len() as f64;
    let corr = |a: usize, b: usize| -> f64 {
        if stds[a] == 0.0 || stds[b] == 0.0 {
            return 0.0;
        }
        let cov = cols[a]
            .iter()
            .zip(&cols[b])
            .map(|(x, y)| (x - means[a]) * (y - means[b]))
            .sum::<f64>()
            / n;
        (cov / (stds[a] * stds[b])).clamp(-1.0, 1.0)
    };
    let c: Vec<f64> = (0..m)
        .map(|j| stds[j] * (0..m).map(|k| 1.0 - corr(j, k).abs()).sum::<f64>())
        .collect();
    let total: f64 = c.iter().sum();
    if !(total > 0.0) {
        return Ok(vec![1.0 / m as f64; m]);
    }
    Ok(c.iter().map(|v| v / total).collect())
}
