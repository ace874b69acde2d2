//! Structure-analysis checks that need generated pools: embedding
//! silhouettes, the low-onto-high overlay, the seed-vs-sample space
//! comparison, and record-order invariance of the cross-level matrix.

use nalgebra::DVector;

use latentlens::flow::{FlowField, IntegratorSpec};
use latentlens::gmm::NoiseSchedule;
use latentlens::learn::{cross_level_matrix, MlpHyper, TrainerKind};
use latentlens::pool::{
    balance_pool, build_pool, split_train_test, stratify, Sampler, SeedPool, SeedRecord,
};
use latentlens::presets;
use latentlens::rng::{domain, substream};
use latentlens::stats;
use latentlens::structure::{
    embed_2d, fit_lda_projection, fit_pca_basis, overlay, structure_sweep, Space,
};

fn stratified_pool(flow: &FlowField, n: usize, levels: usize, seed: u64) -> SeedPool {
    let pool = build_pool(flow, n, Sampler::Ddim, seed, "structure-checks").unwrap();
    let pool = balance_pool(&pool, &mut substream(seed, domain::BALANCE, 0)).unwrap();
    let pool = stratify(&pool, levels).unwrap();
    split_train_test(&pool, 0.2, &mut substream(seed, domain::SPLIT, 0)).unwrap()
}

#[test]
fn filtered_seeds_cluster_under_lda_but_raw_seeds_show_nothing_under_pca() {
    // well-separated 3-class mixture: the LDA embedding of high-confidence
    // seeds shows class-aligned clusters; the unsupervised control (raw
    // top-2 PCA over the unfiltered seed pool) shows none. Filtering itself
    // creates first-moment class structure, so the unsupervised null only
    // holds on unfiltered seeds at this scale.
    let flow = FlowField::new(
        presets::mixture_on_sphere(3, 6, 4.0, 11),
        NoiseSchedule::default_vp(),
        IntegratorSpec::rk4(96).unwrap(),
    )
    .unwrap();
    let pool = stratified_pool(&flow, 1800, 3, 11);
    let level1: Vec<&SeedRecord> = pool.records_at_level(1).collect();
    let points: Vec<&DVector<f64>> = level1.iter().map(|r| &r.seed).collect();
    let labels: Vec<usize> = level1.iter().map(|r| r.label).collect();

    let lda_basis = fit_lda_projection(&points, &labels, 3, 2).unwrap();
    let lda_embedding = embed_2d(&level1, &lda_basis, Space::Seed).unwrap();
    let coords: Vec<DVector<f64>> = lda_embedding
        .iter()
        .map(|p| DVector::from_vec(vec![p.x, p.y]))
        .collect();
    let lda_silhouette = stats::silhouette(&coords, &labels);

    let all: Vec<&SeedRecord> = pool.records.iter().collect();
    let all_points: Vec<&DVector<f64>> = all.iter().map(|r| &r.seed).collect();
    let all_labels: Vec<usize> = all.iter().map(|r| r.label).collect();
    let pca_basis = fit_pca_basis(&all_points, 2).unwrap();
    let pca_embedding = embed_2d(&all, &pca_basis, Space::Seed).unwrap();
    let pca_coords: Vec<DVector<f64>> = pca_embedding
        .iter()
        .map(|p| DVector::from_vec(vec![p.x, p.y]))
        .collect();
    let pca_silhouette = stats::silhouette(&pca_coords, &all_labels);

    println!("silhouettes: lda on level-1 {lda_silhouette:.3}, raw pca on all {pca_silhouette:.3}");
    assert!(lda_silhouette >= 0.3, "lda silhouette {lda_silhouette}");
    assert!(pca_silhouette <= 0.1, "raw-pca silhouette {pca_silhouette}");
}

#[test]
fn low_confidence_seeds_fill_interstitial_regions() {
    // level-L seeds projected through the level-1 discriminant basis sit
    // between the class clusters: their margins are low
    let flow = FlowField::new(
        presets::reference_mixture(),
        NoiseSchedule::default_vp(),
        IntegratorSpec::rk4(128).unwrap(),
    )
    .unwrap();
    let pool = stratified_pool(&flow, 4000, 10, 42);
    let level1: Vec<&SeedRecord> = pool.records_at_level(1).collect();
    let level10: Vec<&SeedRecord> = pool.records_at_level(10).collect();
    let report = overlay(&level1, &level10, Space::Seed).unwrap();
    println!(
        "overlay margins: level1 q1 {:.4}, level10 median {:.4}",
        report.level1_margins.q1, report.level_l_margins.median
    );
    assert!(
        report.level_l_margins.median < report.level1_margins.q1,
        "level10 median {:.4} not below level1 q1 {:.4}",
        report.level_l_margins.median,
        report.level1_margins.q1
    );
    assert_eq!(report.points.len(), level1.len() + level10.len());
}

#[test]
fn generated_samples_keep_more_structure_than_seeds_at_low_confidence() {
    let flow = FlowField::new(
        presets::reference_mixture(),
        NoiseSchedule::default_vp(),
        IntegratorSpec::rk4(128).unwrap(),
    )
    .unwrap();
    let pool = stratified_pool(&flow, 4000, 10, 42);
    let report = structure_sweep(&pool, &[Space::Seed, Space::Sample], 0.2, 42).unwrap();
    let levels = pool.num_levels();
    let seed_low = report.metric(levels, Space::Seed).unwrap().lda_score;
    let sample_low = report.metric(levels, Space::Sample).unwrap().lda_score;
    println!("level-{levels} lda_score: sample {sample_low:.3} vs seed {seed_low:.3}");
    assert!(
        sample_low > seed_low,
        "sample-space score {sample_low} not above seed-space {seed_low}"
    );
}

#[test]
fn sweep_of_single_level_pool_has_one_row_per_space() {
    let flow = FlowField::new(
        presets::mixture_on_sphere(3, 4, 3.0, 5),
        NoiseSchedule::default_vp(),
        IntegratorSpec::rk4(32).unwrap(),
    )
    .unwrap();
    let pool = stratified_pool(&flow, 300, 1, 5);
    let report = structure_sweep(&pool, &[Space::Seed, Space::Sample], 0.2, 5).unwrap();
    assert_eq!(report.metrics.len(), 2);
    assert!(report.metric(1, Space::Seed).is_some());
    assert!(report.metric(1, Space::Sample).is_some());
}

#[test]
fn cross_level_matrix_ignores_record_order() {
    let flow = FlowField::new(
        presets::mixture_on_sphere(3, 4, 3.0, 5),
        NoiseSchedule::default_vp(),
        IntegratorSpec::rk4(64).unwrap(),
    )
    .unwrap();
    let pool = stratified_pool(&flow, 900, 3, 5);
    let hyper = MlpHyper {
        hidden: (16, 8),
        epochs: 15,
        ..MlpHyper::default()
    };
    let baseline_mlp = cross_level_matrix(&pool, TrainerKind::Mlp, &hyper, 9).unwrap();
    let baseline_lda = cross_level_matrix(&pool, TrainerKind::Lda, &hyper, 9).unwrap();

    let mut shuffled = pool.clone();
    // deterministic scramble of record order
    shuffled.records.reverse();
    shuffled.records.rotate_left(17);
    let mlp = cross_level_matrix(&shuffled, TrainerKind::Mlp, &hyper, 9).unwrap();
    let lda = cross_level_matrix(&shuffled, TrainerKind::Lda, &hyper, 9).unwrap();
    assert_eq!(baseline_mlp.accuracies, mlp.accuracies);
    assert_eq!(baseline_lda.accuracies, lda.accuracies);
}
