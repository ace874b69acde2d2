//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `cargo test --test acceptance -- --nocapture` to see them).
//!
//! Criteria 4–9 share one reference run: the stock 5-class/8-dimensional
//! mixture, master seed 42, 20,000-seed pools, 10 confidence levels. The
//! MLP gradient gate executes first inside the shared initializer, so no
//! training-dependent criterion can evaluate unless the gate has passed.

use std::sync::LazyLock;

use nalgebra::DVector;

use latentlens::condgen::{generate_conditional, FilterPolicy};
use latentlens::flow::{FlowField, IntegratorSpec};
use latentlens::gmm::{MixtureModel, NoiseSchedule};
use latentlens::learn::{
    accuracy_vs_confidence, cross_level_matrix, evaluate, train_mlp, AccuracyMatrix, CurveTable,
    MlpHead, MlpHyper, MlpModel, TrainTargets, TrainerKind,
};
use latentlens::pool::{
    balance_pool, build_pool, save_pool, split_train_test, stratify, Sampler, SeedPool, SeedRecord,
    Split,
};
use latentlens::presets;
use latentlens::rng::{domain, standard_normal_vector, substream};
use latentlens::stats;
use latentlens::structure::{structure_sweep, Space, StructureReport};

const MASTER_SEED: u64 = 42;
const POOL_SIZE: usize = 20_000;
const LEVELS: usize = 10;
const TEST_FRACTION: f64 = 0.2;

fn criterion(id: usize, name: &str, ok: bool, details: &str) {
    println!(
        "ACCEPTANCE {id:02} {name}: {} ({details})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {id} ({name}) failed: {details}");
}

struct ReferenceRun {
    flow: FlowField,
    ddim_pool: SeedPool,
    ddpm_pool: SeedPool,
    gradient_max_rel_err: f64,
    mlp_ddim: AccuracyMatrix,
    lda_ddim: AccuracyMatrix,
    mlp_ddpm: AccuracyMatrix,
    unstratified_accuracy: f64,
    curve: CurveTable,
    structure: StructureReport,
    condgen_model: MlpModel,
}

static RUN: LazyLock<ReferenceRun> = LazyLock::new(build_reference_run);

/// Max relative error between analytic and central-finite-difference
/// gradients over 10 random parameters, for both heads.
fn gradient_gate() -> f64 {
    let mut worst = 0.0f64;
    for (head, seed) in [(MlpHead::Classifier, 1u64), (MlpHead::Regressor, 2u64)] {
        let mut rng = substream(MASTER_SEED, domain::VERIFY, 900 + seed);
        let n = 40;
        let points: Vec<DVector<f64>> =
            (0..n).map(|_| standard_normal_vector(&mut rng, 8)).collect();
        let inputs: Vec<&DVector<f64>> = points.iter().collect();
        let targets = match head {
            MlpHead::Classifier => TrainTargets::Labels((0..n).map(|i| i % 5).collect()),
            MlpHead::Regressor => TrainTargets::Vectors(
                (0..n)
                    .map(|i| {
                        let mut t = vec![0.1; 5];
                        t[i % 5] = 0.6;
                        t
                    })
                    .collect(),
            ),
        };
        let mut model = MlpModel::init(8, (16, 12), 5, head, &mut rng);
        let analytic = model.gradients(&inputs, &targets);
        let h = 1e-5;
        for probe in 0..10 {
            let i = (probe * 7919 + 31) % model.num_params();
            let orig = model.param(i);
            model.set_param(i, orig + h);
            let plus = model.mean_loss(&inputs, &targets);
            model.set_param(i, orig - h);
            let minus = model.mean_loss(&inputs, &targets);
            model.set_param(i, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let rel =
                (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

fn finished_pool(flow: &FlowField, sampler: Sampler) -> SeedPool {
    let pool = build_pool(flow, POOL_SIZE, sampler, MASTER_SEED, "acceptance").unwrap();
    let pool = balance_pool(&pool, &mut substream(MASTER_SEED, domain::BALANCE, 0)).unwrap();
    let pool = stratify(&pool, LEVELS).unwrap();
    split_train_test(
        &pool,
        TEST_FRACTION,
        &mut substream(MASTER_SEED, domain::SPLIT, 0),
    )
    .unwrap()
}

fn train_records(pool: &SeedPool) -> Vec<&SeedRecord> {
    pool.records
        .iter()
        .filter(|r| r.split == Split::Train)
        .collect()
}

fn test_records(pool: &SeedPool) -> Vec<&SeedRecord> {
    pool.records
        .iter()
        .filter(|r| r.split == Split::Test)
        .collect()
}

fn level_train(pool: &SeedPool, level: usize) -> Vec<&SeedRecord> {
    pool.records_at_level(level)
        .filter(|r| r.split == Split::Train)
        .collect()
}

fn build_reference_run() -> ReferenceRun {
    // the gradient gate precedes every training-dependent computation
    let gradient_max_rel_err = gradient_gate();
    assert!(
        gradient_max_rel_err <= 1e-4,
        "gradient gate failed (max rel err {gradient_max_rel_err:.3e}); \
         training-dependent criteria not evaluated"
    );

    let flow = FlowField::new(
        presets::reference_mixture(),
        NoiseSchedule::default_vp(),
        IntegratorSpec::rk4(256).unwrap(),
    )
    .unwrap();
    let ddim_pool = finished_pool(&flow, Sampler::Ddim);
    let ddpm_pool = finished_pool(
        &flow,
        Sampler::Ddpm {
            noise_seed: MASTER_SEED,
        },
    );
    let hyper = MlpHyper::default();
    let mlp_ddim = cross_level_matrix(&ddim_pool, TrainerKind::Mlp, &hyper, MASTER_SEED).unwrap();
    let lda_ddim = cross_level_matrix(&ddim_pool, TrainerKind::Lda, &hyper, MASTER_SEED).unwrap();
    let mlp_ddpm = cross_level_matrix(&ddpm_pool, TrainerKind::Mlp, &hyper, MASTER_SEED).unwrap();

    // unconditional comparison: same architecture on the unstratified pool
    let unstratified_model = train_mlp(
        &train_records(&ddim_pool),
        MlpHead::Classifier,
        &hyper,
        &mut substream(MASTER_SEED, domain::TRAIN, 0),
    )
    .unwrap();
    let unstratified_accuracy = evaluate(&unstratified_model, &test_records(&ddim_pool))
        .unwrap()
        .accuracy;

    let regressor = train_mlp(
        &level_train(&ddim_pool, 1),
        MlpHead::Regressor,
        &hyper,
        &mut substream(MASTER_SEED, domain::PREDICT_TRAIN, 0),
    )
    .unwrap();
    let curve = accuracy_vs_confidence(&regressor, &flow, 5_100, 10, MASTER_SEED).unwrap();

    let structure = structure_sweep(
        &ddim_pool,
        &[Space::Seed, Space::Sample],
        TEST_FRACTION,
        MASTER_SEED,
    )
    .unwrap();

    let condgen_model = train_mlp(
        &level_train(&ddim_pool, 1),
        MlpHead::Classifier,
        &hyper,
        &mut substream(MASTER_SEED, domain::CONDGEN_TRAIN, 0),
    )
    .unwrap();

    ReferenceRun {
        flow,
        ddim_pool,
        ddpm_pool,
        gradient_max_rel_err,
        mlp_ddim,
        lda_ddim,
        mlp_ddpm,
        unstratified_accuracy,
        curve,
        structure,
        condgen_model,
    }
}

#[test]
fn criterion_01_closed_form_flow_oracles() {
    let spec = IntegratorSpec::rk4(256).unwrap();
    let schedule = NoiseSchedule::constant(1.0, 1.0).unwrap();

    let identity = FlowField::new(presets::standard_normal_mixture(2), schedule, spec).unwrap();
    let mut identity_err = 0.0f64;
    for i in 0..10 {
        let x0 = standard_normal_vector(&mut substream(MASTER_SEED, domain::VERIFY, 100 + i), 2);
        let traj = identity.integrate_forward(&x0).unwrap();
        identity_err = identity_err
            .max((traj.final_state() - &x0).norm())
            .max(traj.logdet.abs());
    }

    let translation = FlowField::new(
        MixtureModel::isotropic(vec![DVector::from_vec(vec![3.0, 0.0])], 1.0, vec![0], 1).unwrap(),
        schedule,
        spec,
    )
    .unwrap();
    let shift = (1.0 - (-0.5f64).exp()) * 3.0;
    let mut translation_err = 0.0f64;
    for i in 0..10 {
        let x0 = standard_normal_vector(&mut substream(MASTER_SEED, domain::VERIFY, 200 + i), 2);
        let traj = translation.integrate_forward(&x0).unwrap();
        let expected = DVector::from_vec(vec![x0[0] - shift, x0[1]]);
        translation_err = translation_err.max((traj.final_state() - expected).norm());
    }

    let scaling = FlowField::new(
        MixtureModel::isotropic(vec![DVector::zeros(2)], 4.0, vec![0], 1).unwrap(),
        schedule,
        spec,
    )
    .unwrap();
    let factor = (4.0 * (-1.0f64).exp() + 1.0 - (-1.0f64).exp()).sqrt() / 2.0;
    let mut scaling_err = 0.0f64;
    let mut logdet_err = 0.0f64;
    for i in 0..10 {
        let x0 = standard_normal_vector(&mut substream(MASTER_SEED, domain::VERIFY, 300 + i), 2);
        let traj = scaling.integrate_forward(&x0).unwrap();
        scaling_err = scaling_err.max((traj.final_state() - &x0 * factor).norm());
        logdet_err = logdet_err.max((traj.logdet - 2.0 * factor.ln()).abs());
    }

    let ok = identity_err <= 1e-10
        && translation_err <= 1e-6
        && scaling_err <= 1e-5
        && logdet_err <= 1e-5;
    criterion(
        1,
        "closed-form flow oracles",
        ok,
        &format!(
            "identity {identity_err:.2e} ≤ 1e-10, translation {translation_err:.2e} ≤ 1e-6, \
             scaling {scaling_err:.2e} ≤ 1e-5, logdet {logdet_err:.2e} ≤ 1e-5"
        ),
    );
}

#[test]
fn criterion_02_density_identity() {
    let mixture = presets::reference_mixture();
    let schedule = NoiseSchedule::default_vp();
    let points = mixture.sample_data(&mut substream(MASTER_SEED, domain::VERIFY, 0), 100);
    let gaps = |steps: usize| -> Vec<f64> {
        let flow = FlowField::new(
            mixture.clone(),
            schedule,
            IntegratorSpec::rk4(steps).unwrap(),
        )
        .unwrap();
        points
            .iter()
            .map(|(x, _)| flow.verify_density_identity(x).unwrap().abs_err)
            .collect()
    };
    let at512 = gaps(512);
    let max512 = at512.iter().copied().fold(0.0f64, f64::max);
    // truncation at 512 steps sits near the rounding floor; measure the
    // fourth-order shrink where it still dominates
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let coarse = mean(&gaps(64));
    let fine = mean(&gaps(128));
    let shrink = coarse / fine;
    let ok = max512 <= 1e-3 && shrink >= 4.0;
    criterion(
        2,
        "density identity",
        ok,
        &format!("max gap at rk4/512 {max512:.2e} ≤ 1e-3, shrink 64→128 {shrink:.1}x ≥ 4x"),
    );
}

#[test]
fn criterion_03_class_transport() {
    let flow = FlowField::new(
        presets::two_class_mixture(12.0, 1),
        NoiseSchedule::default_vp(),
        IntegratorSpec::rk4(256).unwrap(),
    )
    .unwrap();
    let report = flow
        .verify_class_transport(500, &mut substream(MASTER_SEED, domain::VERIFY, 1))
        .unwrap();
    let ok = report.roundtrip_class_agreement >= 0.99 && report.latent_nn_purity >= 0.99;
    criterion(
        3,
        "class transport",
        ok,
        &format!(
            "round-trip agreement {:.4} ≥ 0.99, 1-NN purity {:.4} ≥ 0.99",
            report.roundtrip_class_agreement, report.latent_nn_purity
        ),
    );
}

#[test]
fn criterion_04_separability_trend() {
    let run = &*RUN;
    let seed_metrics: Vec<_> = (1..=LEVELS)
        .map(|l| run.structure.metric(l, Space::Seed).unwrap())
        .collect();
    let levels: Vec<f64> = (1..=LEVELS).map(|l| l as f64).collect();
    let scores: Vec<f64> = seed_metrics.iter().map(|m| m.lda_score).collect();
    let rho = stats::spearman(&levels, &scores);
    let drop = scores[0] - scores[LEVELS - 1];
    let variances: Vec<f64> = seed_metrics.iter().map(|m| m.pca_variance).collect();
    let spread = variances.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - variances.iter().copied().fold(f64::INFINITY, f64::min);
    let ok = rho <= -0.7 && drop >= 0.10 && spread <= 0.02;
    criterion(
        4,
        "separability trend",
        ok,
        &format!(
            "Spearman(level, lda_score) {rho:.3} ≤ -0.7, level1-level10 drop {drop:.3} ≥ 0.10, \
             pca spread {spread:.4} ≤ 0.02"
        ),
    );
}

#[test]
fn criterion_05_cross_level_heatmaps() {
    let run = &*RUN;
    let ddim_gap = run.mlp_ddim.cell(1, 1) - run.mlp_ddim.cell(LEVELS, LEVELS);
    let block_gap = run.mlp_ddim.block_mean(1..=3, 1..=3) - run.mlp_ddim.block_mean(8..=10, 8..=10);
    let ddpm_gap = (run.mlp_ddpm.cell(1, 1) - run.mlp_ddpm.cell(LEVELS, LEVELS)).abs();
    let trainer_gap = run.mlp_ddim.max_cell_gap(&run.lda_ddim);
    let ok = ddim_gap >= 0.15 && block_gap >= 0.10 && ddpm_gap <= 0.05 && trainer_gap <= 0.15;
    criterion(
        5,
        "cross-level heatmaps",
        ok,
        &format!(
            "ddim cell gap {ddim_gap:.3} ≥ 0.15, corner-block gap {block_gap:.3} ≥ 0.10, \
             ddpm |cell gap| {ddpm_gap:.3} ≤ 0.05, mlp-vs-lda cellwise {trainer_gap:.3} ≤ 0.15"
        ),
    );
}

#[test]
fn criterion_06_accuracy_vs_predicted_confidence() {
    let run = &*RUN;
    let rho = run.curve.spearman_bin_accuracy();
    let ok = rho >= 0.9;
    criterion(
        6,
        "accuracy vs predicted confidence",
        ok,
        &format!(
            "Spearman(bin, accuracy) {rho:.3} ≥ 0.9 over {} bins ({} merged)",
            run.curve.bins.len(),
            run.curve.merged_bins
        ),
    );
}

#[test]
fn criterion_07_filtering_gap() {
    let run = &*RUN;
    let level1 = run.mlp_ddim.cell(1, 1);
    let gap = level1 - run.unstratified_accuracy;
    let ok = gap >= 0.10;
    criterion(
        7,
        "filtering gap",
        ok,
        &format!(
            "level-1 accuracy {level1:.3} vs unstratified {:.3}: gap {gap:.3} ≥ 0.10",
            run.unstratified_accuracy
        ),
    );
}

#[test]
fn criterion_08_conditional_generation() {
    let run = &*RUN;
    // unconditional within-class diversity of true data samples
    let draws = run
        .flow
        .data_mixture()
        .sample_data(&mut substream(MASTER_SEED, domain::VERIFY, 2), 2_500);
    let classes = run.flow.data_mixture().num_classes();
    let mut ok = true;
    let mut details = String::new();
    for class in 0..classes {
        let unconditional: Vec<DVector<f64>> = draws
            .iter()
            .filter(|(_, label)| *label == class)
            .map(|(x, _)| x.clone())
            .collect();
        let unconditional_diversity = stats::mean_pairwise_distance(&unconditional);
        let policy = FilterPolicy::from_pool_boundary(&run.ddim_pool, class, 400_000).unwrap();
        let (report, _) =
            generate_conditional(&run.flow, &run.condgen_model, &policy, 200, MASTER_SEED)
                .unwrap();
        let diversity = report.diversity.unwrap_or(0.0);
        let class_ok = report.verified_accuracy >= 0.95
            && report.generator_invocations == report.n_accepted
            && diversity >= 0.5 * unconditional_diversity;
        if !class_ok || class == 0 {
            details.push_str(&format!(
                "[class {class}: verified {:.3}, invocations {}={}, diversity {:.2} vs 0.5x{:.2}] ",
                report.verified_accuracy,
                report.generator_invocations,
                report.n_accepted,
                diversity,
                unconditional_diversity
            ));
        }
        ok &= class_ok;
    }
    criterion(8, "conditional generation", ok, details.trim());
}

#[test]
fn criterion_09_determinism() {
    let run = &*RUN;
    // full rebuild of the DDIM pool pipeline must be byte-identical
    let rebuilt = finished_pool(&run.flow, Sampler::Ddim);
    let dir = tempfile::tempdir().unwrap();
    let path_a = dir.path().join("a.csv");
    let path_b = dir.path().join("b.csv");
    save_pool(&run.ddim_pool, &path_a).unwrap();
    save_pool(&rebuilt, &path_b).unwrap();
    let identical = std::fs::read(&path_a).unwrap() == std::fs::read(&path_b).unwrap();

    // retraining with the same substream reproduces the level-1 cell exactly
    let hyper = MlpHyper::default();
    let model = train_mlp(
        &level_train(&run.ddim_pool, 1),
        MlpHead::Classifier,
        &hyper,
        &mut substream(MASTER_SEED, domain::TRAIN, 1),
    )
    .unwrap();
    let test: Vec<&SeedRecord> = run
        .ddim_pool
        .records_at_level(1)
        .filter(|r| r.split == Split::Test)
        .collect();
    let accuracy = evaluate(&model, &test).unwrap().accuracy;
    let training_deterministic = accuracy == run.mlp_ddim.cell(1, 1);

    // DDPM rebuilt with a fresh noise stream: same seeds, labels disagree.
    // The baseline is the shared run's (balanced) DDPM pool, aligned by the
    // original record index.
    let fresh = build_pool(
        &run.flow,
        POOL_SIZE,
        Sampler::Ddpm {
            noise_seed: MASTER_SEED + 1,
        },
        MASTER_SEED,
        "acceptance",
    )
    .unwrap();
    let fresh_labels: std::collections::HashMap<usize, usize> =
        fresh.records.iter().map(|r| (r.index, r.label)).collect();
    let agree = run
        .ddpm_pool
        .records
        .iter()
        .filter(|r| fresh_labels.get(&r.index) == Some(&r.label))
        .count();
    let agreement = agree as f64 / run.ddpm_pool.records.len() as f64;

    let ok = identical && training_deterministic && agreement < 1.0;
    criterion(
        9,
        "determinism",
        ok,
        &format!(
            "pool CSVs byte-identical: {identical}, training deterministic: \
             {training_deterministic}, ddpm fresh-noise label agreement {agreement:.4} < 1"
        ),
    );
}

#[test]
fn criterion_10_gradient_gate() {
    let run = &*RUN;
    let ok = run.gradient_max_rel_err <= 1e-4;
    criterion(
        10,
        "gradient gate",
        ok,
        &format!(
            "max rel err {:.2e} ≤ 1e-4 on 10 random parameters per head, checked before training",
            run.gradient_max_rel_err
        ),
    );
}
