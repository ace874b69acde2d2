//! Shared-covariance linear discriminant classifier.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::pool::SeedRecord;

/// Shrinkage weight: λ = SHRINKAGE · trace(Σ)/d, floored at SHRINKAGE for
/// zero-scatter data so the regularized covariance is always SPD.
const SHRINKAGE: f64 = 1e-4;

/// Gaussian shared-covariance discriminant in closed form: the posterior is
/// softmax over δ_c(x) = μ_cᵀΣ⁻¹x − ½μ_cᵀΣ⁻¹μ_c + ln π_c.
#[derive(Debug, Clone)]
pub struct LdaClassifierModel {
    weights: Vec<DVector<f64>>,
    biases: Vec<f64>,
    class_means: Vec<DVector<f64>>,
    priors: Vec<f64>,
}

impl LdaClassifierModel {
    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn class_means(&self) -> &[DVector<f64>] {
        &self.class_means
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    /// Class posterior probabilities.
    pub fn posterior(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut scores: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.dot(x) + b)
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in &mut scores {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in &mut scores {
            *s /= sum;
        }
        scores
    }
}

/// Pooled within-class scatter with shrinkage, then per-class linear
/// discriminants. Classes need at least one point each; a single point per
/// class still fits thanks to the shrinkage floor.
pub fn fit_lda_classifier(
    points: &[&DVector<f64>],
    labels: &[usize],
    num_classes: usize,
) -> Result<LdaClassifierModel> {
    if points.len() != labels.len() {
        return Err(Error::Fit(format!(
            "{} points vs {} labels",
            points.len(),
            labels.len()
        )));
    }
    if num_classes < 2 {
        return Err(Error::Fit("discriminant needs ≥ 2 classes".into()));
    }
    if points.is_empty() {
        return Err(Error::Fit("no training points".into()));
    }
    let d = points[0].len();
    let n = points.len();
    let mut counts = vec![0usize; num_classes];
    let mut means = vec![DVector::<f64>::zeros(d); num_classes];
    for (x, &y) in points.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::Fit(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        counts[y] += 1;
        means[y] += *x;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Fit(format!("class {class} has no records")));
    }
    for (mean, &count) in means.iter_mut().zip(&counts) {
        *mean /= count as f64;
    }
    let (covariance, lambda) = pooled_covariance(points, labels, &means, num_classes);
    let chol = Cholesky::new(covariance).ok_or_else(|| {
        Error::Fit(format!(
            "regularized covariance not SPD even with shrinkage λ = {lambda:.3e}"
        ))
    })?;
    let mut weights = Vec::with_capacity(num_classes);
    let mut biases = Vec::with_capacity(num_classes);
    let mut priors = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let w = chol.solve(&means[c]);
        let prior = counts[c] as f64 / n as f64;
        biases.push(-0.5 * means[c].dot(&w) + prior.ln());
        weights.push(w);
        priors.push(prior);
    }
    Ok(LdaClassifierModel {
        weights,
        biases,
        class_means: means,
        priors,
    })
}

/// Σ̂ + λI with Σ̂ = S_w / max(n − C, 1) and λ = 1e-4·trace(Σ̂)/d (floored).
/// Returns the regularized matrix and the λ used.
pub(crate) fn pooled_covariance(
    points: &[&DVector<f64>],
    labels: &[usize],
    means: &[DVector<f64>],
    num_classes: usize,
) -> (DMatrix<f64>, f64) {
    let d = points[0].len();
    let n = points.len();
    let mut scatter = DMatrix::<f64>::zeros(d, d);
    for (x, &y) in points.iter().zip(labels) {
        let centered = *x - &means[y];
        scatter.syger(1.0, &centered, &centered, 1.0);
    }
    // syger fills the lower triangle; mirror it
    for i in 0..d {
        for j in (i + 1)..d {
            scatter[(i, j)] = scatter[(j, i)];
        }
    }
    let denom = (n.saturating_sub(num_classes)).max(1) as f64;
    let covariance = scatter / denom;
    let mut lambda = SHRINKAGE * covariance.trace() / d as f64;
    if !(lambda > 0.0) {
        lambda = SHRINKAGE;
    }
    (covariance + DMatrix::identity(d, d) * lambda, lambda)
}

/// Fits the discriminant on the records' seeds, canonicalizing by record
/// index so the result is independent of input order.
pub fn train_lda(records: &[&SeedRecord]) -> Result<LdaClassifierModel> {
    if records.is_empty() {
        return Err(Error::Fit("no training records".into()));
    }
    let mut sorted: Vec<&SeedRecord> = records.to_vec();
    sorted.sort_by_key(|r| r.index);
    let num_classes = sorted[0].posterior.probabilities().len();
    let points: Vec<&DVector<f64>> = sorted.iter().map(|r| &r.seed).collect();
    let labels: Vec<usize> = sorted.iter().map(|r| r.label).collect();
    fit_lda_classifier(&points, &labels, num_classes)
}
