//! Fleiss' kappa for a fixed number of raters per item.

use super::EvalError;

/// Fleiss' κ from an items × categories table of rating counts.
///
/// Every row must sum to the same number of raters `n ≥ 2`. When expected
/// agreement is 1 (every rating falls in one category) observed agreement is
/// also 1 and κ is reported as 1.
pub fn fleiss_kappa(table: &[Vec<usize>]) -> Result<f64, EvalError> {
    let raters = table.first().map(|r| r.iter().sum::<usize>()).unwrap_or(0);
    if raters < 2 {
        return Err(EvalError::InsufficientRaters);
    }
    if table.iter().any(|r| r.iter().sum::<usize>() != raters) {
        return Err(EvalError::RaggedRatings);
    }
    let items = table.len() as f64;
    let n = raters as f64;
    let categories = table.iter().map(Vec::len).max().unwrap_or(0);

    let p_bar = table
        .iter()
        .map(|row| {
            let agree: f64 = row.iter().map(|&c| (c * c) as f64).sum::<f64>() - n;
            agree / (n * (n - 1.0))
        })
        .sum::<f64>()
        / items;

    let p_e: f64 = (0..categories)
        .map(|j| {
            let share = table.iter().map(|r| r.get(j).copied().unwrap_or(0)).sum::<usize>() as f64 / (items * n);
            share * share
        })
        .sum();

    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Fleiss' κ from per-item category indices (one entry per rater).
pub fn fleiss_kappa_from_ratings(ratings: &[Vec<usize>], num_categories: usize) -> Result<f64, EvalError> {
    let table: Vec<Vec<usize>> = ratings
        .iter()
        .map(|item| {
            let mut row = vec![0; num_categories];
            for &c in item {
                row[c] += 1;
            }
            row
        })
        .collect();
    fleiss_kappa(&table)
}
