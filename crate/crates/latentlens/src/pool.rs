//! Seed-pool pipeline: sample Gaussian seeds, generate deterministically,
//! classify, balance per label, stratify into confidence levels, split for
//! training, and persist losslessly.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowField, IntegratorSpec};
use crate::gmm::{ClassPosterior, NoiseSchedule};
use crate::rng::{domain, standard_normal_vector, substream};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Which reverse sampler produced the pool. The DDPM control carries its own
/// noise-stream seed so a pool can be rebuilt with fresh stochasticity while
/// keeping the same latent seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampler {
    Ddim,
    Ddpm { noise_seed: u64 },
}

impl Sampler {
    pub fn tag(&self) -> &'static str {
        match self {
            Sampler::Ddim => "ddim",
            Sampler::Ddpm { .. } => "ddpm",
        }
    }
}

/// One seed with everything derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRecord {
    pub index: usize,
    pub seed: DVector<f64>,
    pub sample: DVector<f64>,
    pub posterior: ClassPosterior,
    /// argmax of the posterior (lowest index wins ties)
    pub label: usize,
    /// top-1 minus top-2 posterior probability
    pub confidence: f64,
    /// 1-based confidence level, 1 = highest; None before stratification
    pub level: Option<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub config_digest: String,
    pub sampler: Sampler,
    pub schedule: NoiseSchedule,
    pub integrator: IntegratorSpec,
    pub dim: usize,
    pub num_classes: usize,
    pub requested: usize,
    pub excluded_blowups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedPool {
    pub records: Vec<SeedRecord>,
    pub provenance: Provenance,
}

impl SeedPool {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts_per_label(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.provenance.num_classes];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn num_levels(&self) -> usize {
        self.records
            .iter()
            .filter_map(|r| r.level)
            .max()
            .unwrap_or(0)
    }

    pub fn records_at_level(&self, level: usize) -> impl Iterator<Item = &SeedRecord> {
        self.records.iter().filter(move |r| r.level == Some(level))
    }

    /// Lowest confidence among level-1 records with the given label: the
    /// empirical level-1/level-2 boundary used as the stock filter threshold.
    pub fn level1_boundary(&self, label: usize) -> Option<f64> {
        self.records_at_level(1)
            .filter(|r| r.label == label)
            .map(|r| r.confidence)
            .fold(None, |acc, c| Some(acc.map_or(c, |a: f64| a.min(c))))
    }
}

/// Label = argmax (lowest index on ties); confidence = top-1 minus top-2
/// probability, defined as 1.0 for a single class.
pub fn label_and_confidence(posterior: &ClassPosterior) -> (usize, f64) {
    let p = posterior.probabilities();
    (stats::argmax(p), stats::margin(p))
}

/// Draws `n` latent seeds from per-index substreams of `master_seed`,
/// generates each one with the requested sampler, and classifies the result
/// with the Bayes posterior of the data mixture. Records are produced in
/// index order regardless of worker count; seeds whose trajectory trips the
/// blow-up guard are excluded and counted in the provenance.
pub fn build_pool(
    flow: &FlowField,
    n: usize,
    sampler: Sampler,
    master_seed: u64,
    config_digest: &str,
) -> Result<SeedPool> {
    if n == 0 {
        return Err(Error::Domain("pool size must be ≥ 1".into()));
    }
    let dim = flow.dim();
    let outcomes: Vec<Result<Option<SeedRecord>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut seed_rng = substream(master_seed, domain::SEED_DRAW, i as u64);
            let z = standard_normal_vector(&mut seed_rng, dim);
            let generated = match sampler {
                Sampler::Ddim => flow.generate(&z),
                Sampler::Ddpm { noise_seed } => {
                    let mut noise_rng = substream(noise_seed, domain::DDPM_NOISE, i as u64);
                    flow.ddpm_reverse_sample(&z, &mut noise_rng)
                }
            };
            let x = match generated {
                Ok(x) => x,
                Err(Error::TrajectoryBlowUp { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let posterior = flow.data_mixture().class_posterior(&x)?;
            let (label, confidence) = label_and_confidence(&posterior);
            Ok(Some(SeedRecord {
                index: i,
                seed: z,
                sample: x,
                posterior,
                label,
                confidence,
                level: None,
                split: Split::Train,
            }))
        })
        .collect();
    let mut records = Vec::with_capacity(n);
    let mut excluded = 0usize;
    for outcome in outcomes {
        match outcome? {
            Some(record) => records.push(record),
            None => excluded += 1,
        }
    }
    Ok(SeedPool {
        records,
        provenance: Provenance {
            master_seed,
            config_digest: config_digest.to_string(),
            sampler,
            schedule: *flow.schedule(),
            integrator: flow.spec(),
            dim,
            num_classes: flow.data_mixture().num_classes(),
            requested: n,
            excluded_blowups: excluded,
        },
    })
}

/// Subsamples every over-represented label uniformly at random down to the
/// minimum per-label count. Record order is preserved; a label that is
/// already at the minimum is left untouched (so a balanced pool passes
/// through unchanged).
pub fn balance_pool(pool: &SeedPool, rng: &mut impl Rng) -> Result<SeedPool> {
    let counts = pool.counts_per_label();
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    let min_count = *counts.iter().min().expect("≥1 class");
    let mut keep = vec![true; pool.records.len()];
    for label in 0..counts.len() {
        if counts[label] == min_count {
            continue;
        }
        let positions: Vec<usize> = pool
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label)
            .map(|(i, _)| i)
            .collect();
        let chosen = rand::seq::index::sample(rng, positions.len(), min_count);
        let mut selected = vec![false; positions.len()];
        for idx in chosen.iter() {
            selected[idx] = true;
        }
        for (slot, &pos) in positions.iter().enumerate() {
            keep[pos] = selected[slot];
        }
    }
    let records = pool
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| keep[*i])
        .map(|(_, r)| r.clone())
        .collect();
    Ok(SeedPool {
        records,
        provenance: pool.provenance.clone(),
    })
}

/// Within each label, sorts by confidence descending and splits into
/// `levels` bins; remainder records go one-per-bin starting from bin 1.
/// Level ℓ pools the ℓ-th bin across labels, so level 1 holds the
/// highest-confidence records of every label.
pub fn stratify(pool: &SeedPool, levels: usize) -> Result<SeedPool> {
    if levels == 0 {
        return Err(Error::Domain("need ≥ 1 level".into()));
    }
    let mut records = pool.records.clone();
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, r) in records.iter().enumerate() {
        by_label.entry(r.label).or_default().push(pos);
    }
    for (&label, positions) in &mut by_label {
        if positions.len() < levels {
            return Err(Error::Stratify {
                label,
                count: positions.len(),
                levels,
            });
        }
        positions.sort_by(|&a, &b| {
            records[b]
                .confidence
                .partial_cmp(&records[a].confidence)
                .unwrap()
                .then(records[a].index.cmp(&records[b].index))
        });
        let base = positions.len() / levels;
        let remainder = positions.len() % levels;
        let mut cursor = 0usize;
        for level in 1..=levels {
            let size = base + usize::from(level <= remainder);
            for &pos in &positions[cursor..cursor + size] {
                records[pos].level = Some(level);
            }
            cursor += size;
        }
    }
    Ok(SeedPool {
        records,
        provenance: pool.provenance.clone(),
    })
}

/// Assigns `round(test_fraction · cell)` records of every (label, level)
/// cell to the test split, chosen uniformly at random.
pub fn split_train_test(pool: &SeedPool, test_fraction: f64, rng: &mut impl Rng) -> Result<SeedPool> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Split(format!(
            "test fraction must lie in (0,1), got {test_fraction}"
        )));
    }
    let levels = pool.num_levels();
    if levels == 0 {
        return Err(Error::Split("pool is not stratified".into()));
    }
    let mut records = pool.records.clone();
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (pos, r) in records.iter().enumerate() {
        let level = r
            .level
            .ok_or_else(|| Error::Split(format!("record {} has no level", r.index)))?;
        cells.entry((r.label, level)).or_default().push(pos);
    }
    for label in 0..pool.provenance.num_classes {
        for level in 1..=levels {
            if !cells.contains_key(&(label, level)) {
                return Err(Error::Split(format!(
                    "cell (label {label}, level {level}) is empty"
                )));
            }
        }
    }
    for positions in cells.values() {
        let n_test = (test_fraction * positions.len() as f64).round() as usize;
        let chosen = rand::seq::index::sample(rng, positions.len(), n_test.min(positions.len()));
        for idx in chosen.iter() {
            records[positions[idx]].split = Split::Test;
        }
    }
    Ok(SeedPool {
        records,
        provenance: pool.provenance.clone(),
    })
}

/// 17 significant digits: enough to reproduce any f64 bit-for-bit.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

#[derive(Serialize, Deserialize)]
struct PoolManifest {
    #[serde(flatten)]
    provenance: Provenance,
    kept: usize,
    per_label: Vec<usize>,
    per_level: Vec<usize>,
}

/// Writes the pool as CSV plus a companion `<stem>.manifest.json`.
pub fn save_pool(pool: &SeedPool, path: &Path) -> Result<()> {
    let d = pool.provenance.dim;
    let c = pool.provenance.num_classes;
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("index,split,level,label,confidence");
    for i in 0..d {
        header.push_str(&format!(",z_{i}"));
    }
    for i in 0..d {
        header.push_str(&format!(",x_{i}"));
    }
    for i in 0..c {
        header.push_str(&format!(",p_{i}"));
    }
    writeln!(w, "{header}")?;
    for r in &pool.records {
        let mut line = format!(
            "{},{},{},{},{}",
            r.index,
            r.split,
            r.level.unwrap_or(0),
            r.label,
            format_float(r.confidence)
        );
        for v in r.seed.iter().chain(r.sample.iter()).chain(r.posterior.probabilities()) {
            line.push(',');
            line.push_str(&format_float(*v));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;

    let mut per_level = vec![0usize; pool.num_levels() + 1];
    for r in &pool.records {
        per_level[r.level.unwrap_or(0)] += 1;
    }
    let manifest = PoolManifest {
        provenance: pool.provenance.clone(),
        kept: pool.records.len(),
        per_label: pool.counts_per_label(),
        per_level,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    fs::write(manifest_path(path), json)?;
    Ok(())
}

/// Loads a pool saved by [`save_pool`], re-validating the per-record label
/// and confidence invariants.
pub fn load_pool(path: &Path) -> Result<SeedPool> {
    let manifest_text = fs::read_to_string(manifest_path(path))?;
    let manifest: PoolManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Parse {
            line: 0,
            reason: format!("manifest: {e}"),
        })?;
    let provenance = manifest.provenance;
    let d = provenance.dim;
    let c = provenance.num_classes;

    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        reason: "missing header".into(),
    })?;
    let expected_cols = 5 + 2 * d + c;
    if header.split(',').count() != expected_cols {
        return Err(Error::Parse {
            line: 1,
            reason: format!(
                "header has {} columns, expected {expected_cols}",
                header.split(',').count()
            ),
        });
    }
    let mut records = Vec::new();
    for (zero_based, line) in lines {
        let line_no = zero_based + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("{} columns, expected {expected_cols}", fields.len()),
            });
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|e| Error::Parse {
                line: line_no,
                reason: format!("{what}: {e}"),
            })
        };
        let parse_f64 = |s: &str, what: &str| {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                reason: format!("{what}: {e}"),
            })
        };
        let index = parse_usize(fields[0], "index")?;
        let split = match fields[1] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("unknown split {other:?}"),
                })
            }
        };
        let level = match parse_usize(fields[2], "level")? {
            0 => None,
            l => Some(l),
        };
        let label = parse_usize(fields[3], "label")?;
        let confidence = parse_f64(fields[4], "confidence")?;
        let mut values = Vec::with_capacity(2 * d + c);
        for (col, s) in fields[5..].iter().enumerate() {
            values.push(parse_f64(s, &format!("column {}", col + 5))?);
        }
        let seed = DVector::from_vec(values[..d].to_vec());
        let sample = DVector::from_vec(values[d..2 * d].to_vec());
        let posterior = ClassPosterior::new(values[2 * d..].to_vec()).map_err(|e| Error::Parse {
            line: line_no,
            reason: format!("posterior: {e}"),
        })?;
        let (expect_label, expect_conf) = label_and_confidence(&posterior);
        if label != expect_label || (confidence - expect_conf).abs() > 1e-12 {
            return Err(Error::Parse {
                line: line_no,
                reason: format!(
                    "label/confidence ({label}, {confidence}) inconsistent with posterior \
                     ({expect_label}, {expect_conf})"
                ),
            });
        }
        records.push(SeedRecord {
            index,
            seed,
            sample,
            posterior,
            label,
            confidence,
            level,
            split,
        });
    }
    Ok(SeedPool {
        records,
        provenance,
    })
}
