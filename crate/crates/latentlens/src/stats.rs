//! Small statistics helpers used across the analysis modules.

use nalgebra::DVector;

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Top entry minus runner-up. Defined as 1.0 for a single-entry vector.
pub fn margin(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 1.0;
    }
    let top = argmax(values);
    let mut second = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if i != top && v > second {
            second = v;
        }
    }
    values[top] - second
}

/// Ranks with ties assigned their average rank (1-based).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
///
/// Returns 0.0 when either sequence is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson(&rx, &ry)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Mean silhouette coefficient over all points (Euclidean distance, grouped
/// by label). Points in singleton clusters contribute 0.
pub fn silhouette(points: &[DVector<f64>], labels: &[usize]) -> f64 {
    assert_eq!(points.len(), labels.len());
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let num_labels = labels.iter().max().map_or(0, |&m| m + 1);
    let mut counts = vec![0usize; num_labels];
    for &l in labels {
        counts[l] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        // mean distance from i to each cluster
        let mut sums = vec![0.0; num_labels];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += (&points[i] - &points[j]).norm();
            }
        }
        let own = labels[i];
        if counts[own] < 2 {
            continue; // silhouette of a singleton is 0
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..num_labels)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

/// Quartile summary of a sample (linear interpolation between order stats).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

pub fn quartiles(values: &[f64]) -> Quartiles {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    Quartiles {
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
    }
}

/// Mean pairwise Euclidean distance.
pub fn mean_pairwise_distance(points: &[DVector<f64>]) -> f64 {
    let n = points.len();
    assert!(n >= 2);
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += (&points[i] - &points[j]).norm();
        }
    }
    sum / (n * (n - 1) / 2) as f64
}
