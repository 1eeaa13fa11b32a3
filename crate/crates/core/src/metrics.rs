//! Rank and linear correlation metrics: PLCC, SRCC, KRCC, and the
//! challenge main score (PLCC + SRCC).
//!
//! All functions are pure and safe for unrestricted concurrent use.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("correlation undefined: an input vector is constant")]
    ConstantInput,
}

/// Kendall correlation variant. Benchmark tables in this literature use the
/// tie-corrected tau-b; tau-a is available for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KendallVariant {
    #[default]
    TauB,
    TauA,
}

fn validate(pred: &[f64], mos: &[f64]) -> Result<(), MetricError> {
    if pred.len() != mos.len() {
        return Err(MetricError::LengthMismatch(pred.len(), mos.len()));
    }
    if pred.len() < 2 {
        return Err(MetricError::TooShort(pred.len()));
    }
    if pred.iter().chain(mos.iter()).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Pearson linear correlation coefficient.
pub fn plcc(pred: &[f64], mos: &[f64]) -> Result<f64, MetricError> {
    validate(pred, mos)?;
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = mos.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in pred.iter().zip(mos) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ConstantInput);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Average ranks with ties sharing the mean rank (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Positions i..=j share the mean of ranks i+1..=j+1.
        let rank = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(pred: &[f64], mos: &[f64]) -> Result<f64, MetricError> {
    validate(pred, mos)?;
    plcc(&average_ranks(pred), &average_ranks(mos))
}

/// Kendall rank correlation, tau-b by default.
pub fn krcc(pred: &[f64], mos: &[f64]) -> Result<f64, MetricError> {
    krcc_with(pred, mos, KendallVariant::TauB)
}

/// Kendall correlation via Knight's O(n log n) algorithm: sort by (x, y),
/// then count discordant pairs as merge-sort inversions of y, correcting
/// for ties.
pub fn krcc_with(pred: &[f64], mos: &[f64], variant: KendallVariant) -> Result<f64, MetricError> {
    validate(pred, mos)?;
    let n = pred.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        pred[a]
            .partial_cmp(&pred[b])
            .unwrap()
            .then(mos[a].partial_cmp(&mos[b]).unwrap())
    });

    let pairs = |t: u64| t * (t - 1) / 2;
    let n0 = pairs(n as u64);

    // Tie pair counts in x and jointly in (x, y).
    let mut n1 = 0u64;
    let mut n3 = 0u64;
    {
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && pred[idx[j + 1]] == pred[idx[i]] {
                j += 1;
            }
            n1 += pairs((j - i + 1) as u64);
            let mut k = i;
            while k <= j {
                let mut l = k;
                while l + 1 <= j && mos[idx[l + 1]] == mos[idx[k]] {
                    l += 1;
                }
                n3 += pairs((l - k + 1) as u64);
                k = l + 1;
            }
            i = j + 1;
        }
    }

    // Tie pair counts in y.
    let mut ys: Vec<f64> = mos.to_vec();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut n2 = 0u64;
    {
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && ys[j + 1] == ys[i] {
                j += 1;
            }
            n2 += pairs((j - i + 1) as u64);
            i = j + 1;
        }
    }

    if n1 == n0 || n2 == n0 {
        return Err(MetricError::ConstantInput);
    }

    // Inversions of y in x-sorted order (strict, so y-ties do not count).
    let mut seq: Vec<f64> = idx.iter().map(|&i| mos[i]).collect();
    let swaps = count_inversions(&mut seq);

    let concordant_minus_discordant = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64
        - 2 * swaps as i64;
    let num = concordant_minus_discordant as f64;
    match variant {
        KendallVariant::TauB => {
            Ok(num / (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt())
        }
        KendallVariant::TauA => Ok(num / n0 as f64),
    }
}

fn count_inversions(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n <= 1 {
        return 0;
    }
    let mid = n / 2;
    let (left, right) = v.split_at_mut(mid);
    let mut inv = count_inversions(left) + count_inversions(right);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, 0);
    while i < left.len() && j < right.len() {
        if left[i] <= right[j] {
            merged.push(left[i]);
            i += 1;
        } else {
            inv += (left.len() - i) as u64;
            merged.push(right[j]);
            j += 1;
        }
    }
    merged.extend_from_slice(&left[i..]);
    merged.extend_from_slice(&right[j..]);
    v.copy_from_slice(&merged);
    inv
}

/// NTIRE challenge main score: PLCC + SRCC.
pub fn main_score(plcc: f64, srcc: f64) -> f64 {
    plcc + srcc
}
