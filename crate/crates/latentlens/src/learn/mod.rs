//! Latent classifiers and the predictability diagnostics built on them:
//! the cross-level train/test accuracy matrix and the accuracy-versus-
//! predicted-confidence curve on fresh seeds.

mod lda;
mod mlp;

pub use lda::{fit_lda_classifier, train_lda, LdaClassifierModel};
pub(crate) use lda::pooled_covariance;
pub use mlp::{
    fit_mlp, train_mlp, train_mlp_with_report, MlpHead, MlpHyper, MlpModel, TrainReport,
    TrainTargets,
};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::pool::{SeedPool, SeedRecord, Split};
use crate::rng::{domain, standard_normal_vector, substream};
use crate::stats;

/// Anything that maps a latent point to per-class scores. Classifier-style
/// models return probabilities; the logit regressor returns raw outputs —
/// argmax and margin work on either.
pub trait PosteriorModel: Sync {
    fn num_classes(&self) -> usize;
    fn scores(&self, x: &DVector<f64>) -> Vec<f64>;

    /// Latent dimension the model expects, when it knows one.
    fn input_dim(&self) -> Option<usize> {
        None
    }

    fn predict(&self, x: &DVector<f64>) -> (usize, f64) {
        let s = self.scores(x);
        (stats::argmax(&s), stats::margin(&s))
    }
}

impl PosteriorModel for MlpModel {
    fn num_classes(&self) -> usize {
        self.output_dim()
    }

    fn scores(&self, x: &DVector<f64>) -> Vec<f64> {
        self.forward(x)
    }

    fn input_dim(&self) -> Option<usize> {
        Some(MlpModel::input_dim(self))
    }
}

impl PosteriorModel for LdaClassifierModel {
    fn num_classes(&self) -> usize {
        LdaClassifierModel::num_classes(self)
    }

    fn scores(&self, x: &DVector<f64>) -> Vec<f64> {
        self.posterior(x)
    }

    fn input_dim(&self) -> Option<usize> {
        self.class_means().first().map(|m| m.len())
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<usize>>,
}

/// Evaluates a latent model on the records' seeds against their labels.
/// Macro-F1 averages per-class F1 over every class that has instances or
/// predictions; classes with neither are left out of the mean.
pub fn evaluate(model: &impl PosteriorModel, records: &[&SeedRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Evaluation("no records to evaluate".into()));
    }
    let c = model.num_classes();
    let mut confusion = vec![vec![0usize; c]; c];
    for r in records {
        if r.label >= c {
            return Err(Error::Evaluation(format!(
                "record {} has label {} outside the model's {c} classes",
                r.index, r.label
            )));
        }
        let (pred, _) = model.predict(&r.seed);
        confusion[r.label][pred] += 1;
    }
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let accuracy = correct as f64 / records.len() as f64;
    let mut f1_sum = 0.0;
    let mut f1_classes = 0usize;
    for k in 0..c {
        let tp = confusion[k][k];
        let instances: usize = confusion[k].iter().sum();
        let predictions: usize = (0..c).map(|t| confusion[t][k]).sum();
        if instances == 0 && predictions == 0 {
            continue;
        }
        let denom = instances + predictions; // = 2tp + fp + fn
        if denom > 0 {
            f1_sum += 2.0 * tp as f64 / denom as f64;
        }
        f1_classes += 1;
    }
    Ok(EvalReport {
        accuracy,
        macro_f1: if f1_classes > 0 {
            f1_sum / f1_classes as f64
        } else {
            0.0
        },
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainerKind {
    Mlp,
    Lda,
}

/// The L×L cross-level accuracy matrix: row = training level, column = test
/// level, both 1-based with level 1 = highest confidence.
#[derive(Debug, Clone)]
pub struct AccuracyMatrix {
    pub accuracies: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    pub sampler: String,
    pub trainer: String,
}

impl AccuracyMatrix {
    pub fn levels(&self) -> usize {
        self.accuracies.len()
    }

    /// 1-based accessor matching the level numbering.
    pub fn cell(&self, train_level: usize, test_level: usize) -> f64 {
        self.accuracies[train_level - 1][test_level - 1]
    }

    pub fn block_mean(&self, train_range: std::ops::RangeInclusive<usize>, test_range: std::ops::RangeInclusive<usize>) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in train_range {
            for j in test_range.clone() {
                sum += self.cell(i, j);
                n += 1;
            }
        }
        sum / n as f64
    }

    pub fn to_csv(&self) -> String {
        let l = self.levels();
        let mut out = String::from("train_level");
        for j in 1..=l {
            out.push_str(&format!(",test_level_{j}"));
        }
        out.push('\n');
        for i in 1..=l {
            out.push_str(&i.to_string());
            for j in 1..=l {
                out.push_str(&format!(",{:.6}", self.cell(i, j)));
            }
            out.push('\n');
        }
        out
    }

    /// Largest absolute cellwise difference to another matrix of equal size.
    pub fn max_cell_gap(&self, other: &AccuracyMatrix) -> f64 {
        let mut gap: f64 = 0.0;
        for i in 1..=self.levels() {
            for j in 1..=self.levels() {
                gap = gap.max((self.cell(i, j) - other.cell(i, j)).abs());
            }
        }
        gap
    }
}

/// For each level ℓ, fits a model on that level's train records and
/// evaluates it on every level's test records. Per-level fits run in
/// parallel; each derives its own rng substream, so the matrix does not
/// depend on record order or worker count.
pub fn cross_level_matrix(
    pool: &SeedPool,
    trainer: TrainerKind,
    hyper: &MlpHyper,
    master_seed: u64,
) -> Result<AccuracyMatrix> {
    let levels = pool.num_levels();
    if levels == 0 {
        return Err(Error::Evaluation("pool is not stratified".into()));
    }
    let test_sets: Vec<Vec<&SeedRecord>> = (1..=levels)
        .map(|l| {
            pool.records_at_level(l)
                .filter(|r| r.split == Split::Test)
                .collect()
        })
        .collect();
    let rows: Vec<Result<(Vec<f64>, Vec<usize>)>> = (1..=levels)
        .into_par_iter()
        .map(|train_level| {
            let train: Vec<&SeedRecord> = pool
                .records_at_level(train_level)
                .filter(|r| r.split == Split::Train)
                .collect();
            let stage = format!("train level {train_level}");
            let mut rng = substream(master_seed, domain::TRAIN, train_level as u64);
            let model: Box<dyn PosteriorModel> = match trainer {
                TrainerKind::Mlp => Box::new(
                    train_mlp(&train, MlpHead::Classifier, hyper, &mut rng)
                        .map_err(|e| e.in_stage(&stage))?,
                ),
                TrainerKind::Lda => {
                    Box::new(train_lda(&train).map_err(|e| e.in_stage(&stage))?)
                }
            };
            let mut accuracies = Vec::with_capacity(levels);
            let mut counts = Vec::with_capacity(levels);
            for (j, test) in test_sets.iter().enumerate() {
                let report = evaluate(&model, test).map_err(|e| {
                    e.in_stage(format!("train level {train_level}, test level {}", j + 1))
                })?;
                accuracies.push(report.accuracy);
                counts.push(test.len());
            }
            Ok((accuracies, counts))
        })
        .collect();
    let mut accuracies = Vec::with_capacity(levels);
    let mut counts = Vec::with_capacity(levels);
    for row in rows {
        let (acc, cnt) = row?;
        accuracies.push(acc);
        counts.push(cnt);
    }
    Ok(AccuracyMatrix {
        accuracies,
        counts,
        sampler: pool.provenance.sampler.tag().to_string(),
        trainer: match trainer {
            TrainerKind::Mlp => "mlp".into(),
            TrainerKind::Lda => "lda".into(),
        },
    })
}

impl PosteriorModel for Box<dyn PosteriorModel> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn scores(&self, x: &DVector<f64>) -> Vec<f64> {
        (**self).scores(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Accuracy as a function of predicted confidence, bins ordered from lowest
/// to highest confidence.
#[derive(Debug, Clone)]
pub struct CurveTable {
    pub bins: Vec<CurveBin>,
    /// Bins that collapsed into a neighbour because predictions tied.
    pub merged_bins: usize,
}

impl CurveTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,accuracy,count\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{:.6},{:.6},{:.6},{}\n",
                b.bin_low, b.bin_high, b.accuracy, b.count
            ));
        }
        out
    }

    /// Spearman rank correlation between bin index and bin accuracy.
    pub fn spearman_bin_accuracy(&self) -> f64 {
        let idx: Vec<f64> = (0..self.bins.len()).map(|i| i as f64).collect();
        let acc: Vec<f64> = self.bins.iter().map(|b| b.accuracy).collect();
        stats::spearman(&idx, &acc)
    }
}

/// Draws `n_fresh` new seeds, predicts label and confidence with the latent
/// model, establishes ground truth by actually generating each seed, and
/// reports per-bin accuracy over `bins` equal-count predicted-confidence
/// bins. Tied predictions are never split across bins; bins emptied by tie
/// runs merge into their neighbour and are counted in `merged_bins`.
pub fn accuracy_vs_confidence(
    model: &impl PosteriorModel,
    flow: &FlowField,
    n_fresh: usize,
    bins: usize,
    master_seed: u64,
) -> Result<CurveTable> {
    if n_fresh == 0 || bins == 0 {
        return Err(Error::Domain("need n_fresh ≥ 1 and bins ≥ 1".into()));
    }
    let dim = flow.dim();
    let outcomes: Vec<Result<(f64, bool)>> = (0..n_fresh)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(master_seed, domain::FRESH_SEEDS, i as u64);
            let z = standard_normal_vector(&mut rng, dim);
            let (pred_label, pred_conf) = model.predict(&z);
            let x = flow.generate(&z)?;
            let truth = stats::argmax(
                flow.data_mixture().class_posterior(&x)?.probabilities(),
            );
            Ok((pred_conf, pred_label == truth))
        })
        .collect();
    let mut results = Vec::with_capacity(n_fresh);
    for o in outcomes {
        results.push(o?);
    }
    results.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let bins = bins.min(n_fresh);
    let mut edges = Vec::with_capacity(bins + 1);
    edges.push(0usize);
    for b in 1..=bins {
        let mut edge = b * n_fresh / bins;
        // keep tie runs inside one bin
        while edge < n_fresh && edge > 0 && results[edge].0 == results[edge - 1].0 {
            edge += 1;
        }
        edges.push(edge.max(*edges.last().unwrap()));
    }
    *edges.last_mut().unwrap() = n_fresh;
    let mut table = CurveTable {
        bins: Vec::new(),
        merged_bins: 0,
    };
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if lo == hi {
            table.merged_bins += 1;
            continue;
        }
        let slice = &results[lo..hi];
        let correct = slice.iter().filter(|(_, ok)| *ok).count();
        table.bins.push(CurveBin {
            bin_low: slice[0].0,
            bin_high: slice[slice.len() - 1].0,
            accuracy: correct as f64 / slice.len() as f64,
            count: slice.len(),
        });
    }
    Ok(table)
}
