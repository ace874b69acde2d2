//! Confidence-filtered conditional generation: draw seeds, keep only those
//! whose latent model predicts the target class with enough margin, and run
//! the generator on the accepted seeds alone.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::learn::PosteriorModel;
use crate::pool::SeedPool;
use crate::rng::{domain, standard_normal_vector, substream};
use crate::stats;

/// Latent-model evaluation batch size. Acceptance is decided per draw
/// index, so results do not depend on this.
const FILTER_BATCH: usize = 1024;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FilterPolicy {
    pub target_class: usize,
    pub threshold: f64,
    pub max_draws: usize,
}

impl FilterPolicy {
    pub fn new(target_class: usize, threshold: f64, max_draws: usize) -> Result<Self> {
        if max_draws == 0 {
            return Err(Error::Domain("max_draws must be ≥ 1".into()));
        }
        Ok(Self {
            target_class,
            threshold,
            max_draws,
        })
    }

    /// Stock threshold: the empirical level-1/level-2 confidence boundary of
    /// the target class in a stratified pool.
    pub fn from_pool_boundary(pool: &SeedPool, target_class: usize, max_draws: usize) -> Result<Self> {
        let threshold = pool.level1_boundary(target_class).ok_or_else(|| {
            Error::Domain(format!(
                "pool has no level-1 records with label {target_class}"
            ))
        })?;
        Self::new(target_class, threshold, max_draws)
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub seeds: Vec<DVector<f64>>,
    /// Predicted margin of each accepted seed.
    pub margins: Vec<f64>,
    pub drawn: usize,
}

/// Repeatedly draws z ~ N(0, I) from per-index substreams and accepts a seed
/// when the latent model predicts the target class with margin ≥ τ. Stops
/// after `n_requested` accepts or `policy.max_draws` draws; exhausting the
/// budget with zero accepts is an error.
pub fn filter_seeds(
    model: &impl PosteriorModel,
    policy: &FilterPolicy,
    n_requested: usize,
    master_seed: u64,
) -> Result<FilterOutcome> {
    let mut outcome = FilterOutcome {
        seeds: Vec::with_capacity(n_requested),
        margins: Vec::with_capacity(n_requested),
        drawn: 0,
    };
    if n_requested == 0 {
        return Ok(outcome);
    }
    if policy.target_class >= model.num_classes() {
        return Err(Error::Domain(format!(
            "target class {} outside the model's {} classes",
            policy.target_class,
            model.num_classes()
        )));
    }
    let dim = model_input_dim(model)?;
    let mut next = 0usize;
    while next < policy.max_draws && outcome.seeds.len() < n_requested {
        let batch_end = (next + FILTER_BATCH).min(policy.max_draws);
        let evaluated: Vec<(DVector<f64>, usize, f64)> = (next..batch_end)
            .into_par_iter()
            .map(|i| {
                let mut rng = substream(master_seed, domain::FILTER, i as u64);
                let z = standard_normal_vector(&mut rng, dim);
                let (label, margin) = model.predict(&z);
                (z, label, margin)
            })
            .collect();
        for (z, label, margin) in evaluated {
            outcome.drawn += 1;
            if label == policy.target_class && margin >= policy.threshold {
                outcome.seeds.push(z);
                outcome.margins.push(margin);
                if outcome.seeds.len() == n_requested {
                    break;
                }
            }
        }
        next = batch_end;
    }
    if outcome.seeds.is_empty() {
        return Err(Error::Exhausted {
            draws: outcome.drawn,
        });
    }
    Ok(outcome)
}

fn model_input_dim(model: &impl PosteriorModel) -> Result<usize> {
    model.input_dim().ok_or_else(|| {
        Error::Domain("latent model does not expose an input dimension".into())
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CondGenReport {
    pub target_class: usize,
    pub threshold: f64,
    pub n_requested: usize,
    pub n_drawn: usize,
    pub n_accepted: usize,
    pub acceptance_rate: f64,
    /// Fraction of generated samples whose Bayes label equals the target.
    pub verified_accuracy: f64,
    /// Mean pairwise distance among accepted generated samples.
    pub diversity: Option<f64>,
    /// How many times the generator was invoked (black-box economy check:
    /// exactly once per accepted seed).
    pub generator_invocations: usize,
}

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub seed: DVector<f64>,
    pub sample: DVector<f64>,
    pub predicted_margin: f64,
    pub verified_label: usize,
}

/// CSV block for generated samples: target class, predicted margin,
/// verified label, then the sample coordinates.
pub fn samples_csv(report: &CondGenReport, samples: &[GeneratedSample]) -> String {
    let d = samples.first().map_or(0, |s| s.sample.len());
    let mut out = String::from("target_class,predicted_margin,verified_label");
    for i in 0..d {
        out.push_str(&format!(",x_{i}"));
    }
    out.push('\n');
    for s in samples {
        out.push_str(&format!(
            "{},{},{}",
            report.target_class,
            crate::pool::format_float(s.predicted_margin),
            s.verified_label
        ));
        for v in s.sample.iter() {
            out.push_str(&format!(",{}", crate::pool::format_float(*v)));
        }
        out.push('\n');
    }
    out
}

/// Filters seeds with the latent model, then invokes the generator on the
/// accepted seeds only — the generator is never consulted during filtering —
/// and verifies every generated sample with the Bayes posterior.
pub fn generate_conditional(
    flow: &FlowField,
    model: &impl PosteriorModel,
    policy: &FilterPolicy,
    n_requested: usize,
    master_seed: u64,
) -> Result<(CondGenReport, Vec<GeneratedSample>)> {
    if n_requested == 0 {
        return Ok((
            CondGenReport {
                target_class: policy.target_class,
                threshold: policy.threshold,
                n_requested: 0,
                n_drawn: 0,
                n_accepted: 0,
                acceptance_rate: 0.0,
                verified_accuracy: 0.0,
                diversity: None,
                generator_invocations: 0,
            },
            Vec::new(),
        ));
    }
    let outcome = filter_seeds(model, policy, n_requested, master_seed)?;
    let invocations = AtomicUsize::new(0);
    let samples: Vec<GeneratedSample> = outcome
        .seeds
        .par_iter()
        .zip(outcome.margins.par_iter())
        .map(|(z, &margin)| {
            invocations.fetch_add(1, Ordering::Relaxed);
            let x = flow.generate(z)?;
            let posterior = flow.data_mixture().class_posterior(&x)?;
            Ok(GeneratedSample {
                seed: z.clone(),
                sample: x,
                predicted_margin: margin,
                verified_label: stats::argmax(posterior.probabilities()),
            })
        })
        .collect::<Result<_>>()?;
    let n_accepted = samples.len();
    let verified = samples
        .iter()
        .filter(|s| s.verified_label == policy.target_class)
        .count();
    let diversity = if n_accepted >= 2 {
        let points: Vec<DVector<f64>> = samples.iter().map(|s| s.sample.clone()).collect();
        Some(stats::mean_pairwise_distance(&points))
    } else {
        None
    };
    let report = CondGenReport {
        target_class: policy.target_class,
        threshold: policy.threshold,
        n_requested,
        n_drawn: outcome.drawn,
        n_accepted,
        acceptance_rate: n_accepted as f64 / outcome.drawn as f64,
        verified_accuracy: verified as f64 / n_accepted as f64,
        diversity,
        generator_invocations: invocations.load(Ordering::Relaxed),
    };
    Ok((report, samples))
}

/// Mean pairwise Euclidean distance; undefined below two samples.
pub fn diversity(samples: &[DVector<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::DiversityUndefined(samples.len()));
    }
    Ok(stats::mean_pairwise_distance(samples))
}
