//! Rank correlation between two orderings of the same items.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error("rank lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two items, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: one list is constant")]
    Constant,
    #[error("rank lists must not contain NaN")]
    NaN,
}

fn check(x: &[f64], y: &[f64]) -> Result<(), RankError> {
    if x.len() != y.len() {
        return Err(RankError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(RankError::TooShort(x.len()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(RankError::NaN);
    }
    Ok(())
}

/// 1-based ranks, smallest value first; ties share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of the average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, RankError> {
    check(x, y)?;
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(RankError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Kendall's tau-b, which corrects for ties in either list.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64, RankError> {
    check(x, y)?;
    let n = x.len();
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            match (dx, dy) {
                (0, 0) => {
                    ties_x += 1;
                    ties_y += 1;
                }
                (0, _) => ties_x += 1,
                (_, 0) => ties_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = ((n0 - ties_x) as f64 * (n0 - ties_y) as f64).sqrt();
    if denom == 0.0 {
        return Err(RankError::Constant);
    }
    Ok(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0))
}

/// Ranks by descending score (1 = best). Ties go to the smaller key.
pub fn rank_descending<K: Ord>(items: &[(K, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&a, &b| {
        items[b]
            .1
            .total_cmp(&items[a].1)
            .then_with(|| items[a].0.cmp(&items[b].0))
    });
    let mut ranks = vec![0; items.len()];
    for (pos, &i) in idx.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 2.0, 4.0, 3.0];
        assert!((spearman_rho(&x, &y).unwrap() - 0.8).abs() < 1e-12);
        assert!((kendall_tau(&x, &y).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_and_reversed_are_exact() {
        let x = [3.0, 1.0, 2.0, 5.0, 4.0];
        let rev: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(spearman_rho(&x, &x).unwrap(), 1.0);
        assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
        assert_eq!(spearman_rho(&x, &rev).unwrap(), -1.0);
        assert_eq!(kendall_tau(&x, &rev).unwrap(), -1.0);
    }

    #[test]
    fn ties_use_average_ranks() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 20.0, 5.0]),
            vec![2.0, 3.5, 3.5, 1.0]
        );
        // tau-b with a tie in x: pairs (0,1) C, (0,2) C, (1,2) tie in x.
        let t = kendall_tau(&[1.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((t - 2.0 / (2.0f64 * 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(spearman_rho(&[1.0], &[1.0]), Err(RankError::TooShort(1)));
        assert_eq!(
            kendall_tau(&[1.0, 2.0], &[1.0]),
            Err(RankError::LengthMismatch(2, 1))
        );
        assert_eq!(
            spearman_rho(&[1.0, 1.0], &[1.0, 2.0]),
            Err(RankError::Constant)
        );
    }

    #[test]
    fn descending_ranks_break_ties_by_key() {
        let items = [("b", 1.0), ("a", 1.0), ("c", 2.0)];
        assert_eq!(rank_descending(&items), vec![3, 2, 1]);
    }
}
