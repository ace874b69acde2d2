//! Class-separability analysis: supervised LDA probing projection with its
//! discriminability score, the PCA variance baseline, deterministic 2D
//! embeddings (a linear stand-in for the usual nonlinear visualization
//! stage), and the low-onto-high confidence overlay.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::learn::{fit_lda_classifier, pooled_covariance};
use crate::pool::{SeedPool, SeedRecord};
use crate::rng::{domain, substream};
use crate::stats::{self, Quartiles};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Seed,
    Sample,
}

impl Space {
    pub fn tag(&self) -> &'static str {
        match self {
            Space::Seed => "seed",
            Space::Sample => "sample",
        }
    }

    fn features<'a>(&self, record: &'a SeedRecord) -> &'a DVector<f64> {
        match self {
            Space::Seed => &record.seed,
            Space::Sample => &record.sample,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    Lda,
    Pca,
}

/// d×k matrix of discriminant or principal directions, columns unit-norm
/// with a fixed sign convention (largest-magnitude entry positive) so
/// projections are deterministic.
#[derive(Debug, Clone)]
pub struct ProjectionBasis {
    pub matrix: DMatrix<f64>,
    pub kind: BasisKind,
    /// Generalized (LDA) or covariance (PCA) eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl ProjectionBasis {
    pub fn k(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.matrix.transpose() * x
    }
}

fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        let mut lead = 0usize;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[lead].abs() {
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Eigenvalues/-vectors of a symmetric matrix, sorted descending.
fn symmetric_eigen_sorted(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eigen = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eigen.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].partial_cmp(&eigen.eigenvalues[a]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| eigen.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eigen.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    (values, vectors)
}

/// Top-k generalized eigenvectors of (S_w + λI)⁻¹ S_b via Cholesky
/// whitening of the regularized within-class scatter.
pub fn fit_lda_projection(
    points: &[&DVector<f64>],
    labels: &[usize],
    num_classes: usize,
    k: usize,
) -> Result<ProjectionBasis> {
    if num_classes < 2 {
        return Err(Error::Fit("LDA projection needs ≥ 2 classes".into()));
    }
    if k == 0 || k > num_classes - 1 {
        return Err(Error::Dimension {
            expected: num_classes - 1,
            got: k,
        });
    }
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::Fit("empty or mismatched point/label sets".into()));
    }
    let d = points[0].len();
    let n = points.len();
    let mut counts = vec![0usize; num_classes];
    let mut means = vec![DVector::<f64>::zeros(d); num_classes];
    let mut grand = DVector::<f64>::zeros(d);
    for (x, &y) in points.iter().zip(labels) {
        counts[y] += 1;
        means[y] += *x;
        grand += *x;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Fit(format!("class {class} has no records")));
    }
    grand /= n as f64;
    for (mean, &count) in means.iter_mut().zip(&counts) {
        *mean /= count as f64;
    }
    // regularized within-class scatter, shrinkage on the covariance scale
    let (cov_reg, _) = pooled_covariance(points, labels, &means, num_classes);
    let scatter_w = cov_reg * (n.saturating_sub(num_classes)).max(1) as f64;
    let mut scatter_b = DMatrix::<f64>::zeros(d, d);
    for (mean, &count) in means.iter().zip(&counts) {
        let centered = mean - &grand;
        scatter_b.syger(count as f64, &centered, &centered, 1.0);
    }
    for i in 0..d {
        for j in (i + 1)..d {
            scatter_b[(i, j)] = scatter_b[(j, i)];
        }
    }
    let chol = Cholesky::new(scatter_w)
        .ok_or_else(|| Error::Fit("within-class scatter not SPD after shrinkage".into()))?;
    let l = chol.l();
    // M = L⁻¹ S_b L⁻ᵀ, symmetric PSD, shares eigenvalues with S_w⁻¹S_b
    let t = l
        .solve_lower_triangular(&scatter_b)
        .ok_or_else(|| Error::Fit("singular Cholesky factor".into()))?;
    let m = l
        .solve_lower_triangular(&t.transpose())
        .ok_or_else(|| Error::Fit("singular Cholesky factor".into()))?
        .transpose();
    let m = (&m + m.transpose()) * 0.5;
    let (values, vectors) = symmetric_eigen_sorted(m);
    let lt = l.transpose();
    let mut columns = Vec::with_capacity(k);
    for i in 0..k {
        let v = vectors.column(i).into_owned();
        let a = lt
            .solve_upper_triangular(&v)
            .ok_or_else(|| Error::Fit("singular Cholesky factor".into()))?;
        columns.push(a);
    }
    let mut matrix = DMatrix::from_columns(&columns);
    fix_column_signs(&mut matrix);
    Ok(ProjectionBasis {
        matrix,
        kind: BasisKind::Lda,
        eigenvalues: values[..k].to_vec(),
    })
}

/// Top-k principal directions of the sample covariance.
pub fn fit_pca_basis(points: &[&DVector<f64>], k: usize) -> Result<ProjectionBasis> {
    if points.len() < 2 {
        return Err(Error::Degenerate(format!(
            "PCA needs ≥ 2 records, got {}",
            points.len()
        )));
    }
    let d = points[0].len();
    if k == 0 || k > d {
        return Err(Error::Dimension { expected: d, got: k });
    }
    let (values, vectors, total) = sample_covariance_eigen(points)?;
    if !(total > 0.0) {
        return Err(Error::Degenerate("data has zero total variance".into()));
    }
    let mut matrix = DMatrix::from_columns(
        &(0..k).map(|i| vectors.column(i).into_owned()).collect::<Vec<_>>(),
    );
    fix_column_signs(&mut matrix);
    Ok(ProjectionBasis {
        matrix,
        kind: BasisKind::Pca,
        eigenvalues: values[..k].to_vec(),
    })
}

fn sample_covariance_eigen(points: &[&DVector<f64>]) -> Result<(Vec<f64>, DMatrix<f64>, f64)> {
    let d = points[0].len();
    let n = points.len();
    let mut mean = DVector::<f64>::zeros(d);
    for x in points {
        mean += *x;
    }
    mean /= n as f64;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for x in points {
        let c = *x - &mean;
        cov.syger(1.0, &c, &c, 1.0);
    }
    for i in 0..d {
        for j in (i + 1)..d {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    cov /= (n - 1) as f64;
    let total = cov.trace();
    let (values, vectors) = symmetric_eigen_sorted(cov);
    Ok((values, vectors, total))
}

/// Fraction of total variance captured by the first k principal components.
pub fn pca_variance(points: &[&DVector<f64>], k: usize) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Degenerate(format!(
            "PCA variance needs ≥ 2 records, got {}",
            points.len()
        )));
    }
    let d = points[0].len();
    if k == 0 || k > d {
        return Err(Error::Dimension { expected: d, got: k });
    }
    let (values, _, total) = sample_covariance_eigen(points)?;
    if !(total > 0.0) {
        return Err(Error::Degenerate("data has zero total variance".into()));
    }
    Ok(values[..k].iter().map(|v| v.max(0.0)).sum::<f64>() / total)
}

/// Held-out accuracy of the shared-covariance discriminant on a stratified
/// split: the separability score in [0, 1].
pub fn lda_score(
    points: &[&DVector<f64>],
    labels: &[usize],
    num_classes: usize,
    test_fraction: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Split(format!(
            "test fraction must lie in (0,1), got {test_fraction}"
        )));
    }
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::Fit("empty or mismatched point/label sets".into()));
    }
    let mut is_test = vec![false; points.len()];
    for class in 0..num_classes {
        let members: Vec<usize> = (0..points.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            return Err(Error::Fit(format!("class {class} has no records")));
        }
        let n_test = ((test_fraction * members.len() as f64).round() as usize)
            .clamp(1, members.len().saturating_sub(1).max(1));
        let chosen = rand::seq::index::sample(rng, members.len(), n_test);
        for idx in chosen.iter() {
            is_test[members[idx]] = true;
        }
    }
    let mut train_points = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_points = Vec::new();
    let mut test_labels = Vec::new();
    for i in 0..points.len() {
        if is_test[i] {
            test_points.push(points[i]);
            test_labels.push(labels[i]);
        } else {
            train_points.push(points[i]);
            train_labels.push(labels[i]);
        }
    }
    let model = fit_lda_classifier(&train_points, &train_labels, num_classes)?;
    if test_points.is_empty() {
        return Err(Error::Evaluation("stratified split left no test records".into()));
    }
    let correct = test_points
        .iter()
        .zip(&test_labels)
        .filter(|(x, &y)| stats::argmax(&model.posterior(x)) == y)
        .count();
    Ok(correct as f64 / test_points.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EmbeddedPoint {
    pub x: f64,
    pub y: f64,
    pub label: usize,
    pub level: usize,
    pub space: Space,
}

/// Second projection stage: identity for k=2, padded for k=1, otherwise the
/// top-2 principal directions of the projected coordinates (fit on
/// `fit_on`, applied to `apply_to`).
fn second_stage_2d(fit_on: &[DVector<f64>], apply_to: &[DVector<f64>]) -> Result<Vec<[f64; 2]>> {
    let k = fit_on.first().map_or(0, |v| v.len());
    match k {
        0 => Ok(apply_to.iter().map(|_| [0.0, 0.0]).collect()),
        1 => Ok(apply_to.iter().map(|v| [v[0], 0.0]).collect()),
        2 => Ok(apply_to.iter().map(|v| [v[0], v[1]]).collect()),
        _ => {
            let refs: Vec<&DVector<f64>> = fit_on.iter().collect();
            let pca = fit_pca_basis(&refs, 2)?;
            Ok(apply_to
                .iter()
                .map(|v| {
                    let p = pca.project(v);
                    [p[0], p[1]]
                })
                .collect())
        }
    }
}

/// Deterministic 2D coordinates for each record: basis projection followed
/// by the linear second stage, with label/level/space metadata attached.
pub fn embed_2d(
    records: &[&SeedRecord],
    basis: &ProjectionBasis,
    space: Space,
) -> Result<Vec<EmbeddedPoint>> {
    let projected: Vec<DVector<f64>> = records
        .iter()
        .map(|r| basis.project(space.features(r)))
        .collect();
    let coords = second_stage_2d(&projected, &projected)?;
    Ok(records
        .iter()
        .zip(coords)
        .map(|(r, [x, y])| EmbeddedPoint {
            x,
            y,
            label: r.label,
            level: r.level.unwrap_or(0),
            space,
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct OverlayReport {
    pub points: Vec<EmbeddedPoint>,
    pub level1_margins: Quartiles,
    pub level_l_margins: Quartiles,
}

/// Fits the LDA basis and classifier on the level-1 records only, projects
/// both sets through them, and summarizes the level-1-classifier confidence
/// margins of each set.
pub fn overlay(
    level1: &[&SeedRecord],
    level_l: &[&SeedRecord],
    space: Space,
) -> Result<OverlayReport> {
    if level1.is_empty() || level_l.is_empty() {
        return Err(Error::Evaluation("overlay needs two non-empty sets".into()));
    }
    let num_classes = level1[0].posterior.probabilities().len();
    let l1_points: Vec<&DVector<f64>> = level1.iter().map(|r| space.features(r)).collect();
    let l1_labels: Vec<usize> = level1.iter().map(|r| r.label).collect();
    let (margins1, margins_l, basis): (Vec<f64>, Vec<f64>, ProjectionBasis) = if num_classes >= 2 {
        let classifier = fit_lda_classifier(&l1_points, &l1_labels, num_classes)?;
        let margin_of = |r: &SeedRecord| stats::margin(&classifier.posterior(space.features(r)));
        let basis = fit_lda_projection(&l1_points, &l1_labels, num_classes, num_classes - 1)?;
        (
            level1.iter().map(|r| margin_of(r)).collect(),
            level_l.iter().map(|r| margin_of(r)).collect(),
            basis,
        )
    } else {
        // single class: margins are 1 by definition; embed via raw PCA
        let k = 2.min(l1_points[0].len());
        let basis = fit_pca_basis(&l1_points, k)?;
        (
            vec![1.0; level1.len()],
            vec![1.0; level_l.len()],
            basis,
        )
    };
    let l1_proj: Vec<DVector<f64>> = l1_points.iter().map(|x| basis.project(x)).collect();
    let ll_proj: Vec<DVector<f64>> = level_l
        .iter()
        .map(|r| basis.project(space.features(r)))
        .collect();
    let mut all_proj = l1_proj.clone();
    all_proj.extend(ll_proj);
    let coords = second_stage_2d(&l1_proj, &all_proj)?;
    let points = level1
        .iter()
        .chain(level_l.iter())
        .zip(coords)
        .map(|(r, [x, y])| EmbeddedPoint {
            x,
            y,
            label: r.label,
            level: r.level.unwrap_or(0),
            space,
        })
        .collect();
    Ok(OverlayReport {
        points,
        level1_margins: stats::quartiles(&margins1),
        level_l_margins: stats::quartiles(&margins_l),
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StructureMetrics {
    pub level: usize,
    pub space: Space,
    pub lda_score: f64,
    pub pca_variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StructureReport {
    pub metrics: Vec<StructureMetrics>,
    pub embeddings: Vec<EmbeddedPoint>,
    /// Raw k-dimensional LDA-projected coordinates, exported so external
    /// (e.g. nonlinear) embedding tools can be applied downstream.
    pub raw_coordinates: Vec<RawCoordinate>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RawCoordinate {
    pub level: usize,
    pub space: Space,
    pub label: usize,
    pub coords: Vec<f64>,
}

impl StructureReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("level,space,lda_score,pca_variance\n");
        for m in &self.metrics {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                m.level,
                m.space.tag(),
                m.lda_score,
                m.pca_variance
            ));
        }
        out
    }

    pub fn raw_coordinates_csv(&self) -> String {
        let k = self.raw_coordinates.first().map_or(0, |r| r.coords.len());
        let mut out = String::from("level,space,label");
        for i in 0..k {
            out.push_str(&format!(",c_{i}"));
        }
        out.push('\n');
        for r in &self.raw_coordinates {
            out.push_str(&format!("{},{},{}", r.level, r.space.tag(), r.label));
            for c in &r.coords {
                out.push_str(&format!(",{}", crate::pool::format_float(*c)));
            }
            out.push('\n');
        }
        out
    }

    pub fn metric(&self, level: usize, space: Space) -> Option<&StructureMetrics> {
        self.metrics
            .iter()
            .find(|m| m.level == level && m.space == space)
    }
}

/// Per level and per space: LDA score, PCA variance (k = C−1 each) and the
/// 2D embedding. The per-level held-out splits derive from substreams of
/// `master_seed`, so the sweep is deterministic.
pub fn structure_sweep(
    pool: &SeedPool,
    spaces: &[Space],
    test_fraction: f64,
    master_seed: u64,
) -> Result<StructureReport> {
    let levels = pool.num_levels();
    if levels == 0 {
        return Err(Error::Evaluation("pool is not stratified".into()));
    }
    let num_classes = pool.provenance.num_classes;
    let k = (num_classes - 1).max(1).min(pool.provenance.dim);
    let mut report = StructureReport {
        metrics: Vec::new(),
        embeddings: Vec::new(),
        raw_coordinates: Vec::new(),
    };
    for level in 1..=levels {
        let records: Vec<&SeedRecord> = pool.records_at_level(level).collect();
        for (space_idx, &space) in spaces.iter().enumerate() {
            let tag = format!("level {level}, {} space", space.tag());
            let points: Vec<&DVector<f64>> =
                records.iter().map(|r| space.features(r)).collect();
            let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
            let mut rng = substream(
                master_seed,
                domain::LDA_SCORE,
                (level * spaces.len() + space_idx) as u64,
            );
            let score = lda_score(&points, &labels, num_classes, test_fraction, &mut rng)
                .map_err(|e| e.in_stage(&tag))?;
            let variance =
                pca_variance(&points, k).map_err(|e| e.in_stage(&tag))?;
            report.metrics.push(StructureMetrics {
                level,
                space,
                lda_score: score,
                pca_variance: variance,
            });
            let basis = fit_lda_projection(&points, &labels, num_classes, k)
                .map_err(|e| e.in_stage(&tag))?;
            report
                .embeddings
                .extend(embed_2d(&records, &basis, space).map_err(|e| e.in_stage(&tag))?);
            for r in &records {
                let coords = basis.project(space.features(r));
                report.raw_coordinates.push(RawCoordinate {
                    level,
                    space,
                    label: r.label,
                    coords: coords.iter().copied().collect(),
                });
            }
        }
    }
    Ok(report)
}
