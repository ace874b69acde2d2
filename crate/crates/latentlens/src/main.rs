//! Experiment driver. Every stage is a subcommand; outputs land in --out and
//! are tracked in a run manifest keyed by the config digest, so re-running a
//! completed stage is a no-op unless --force.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 verification failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use latentlens::condgen::{generate_conditional, samples_csv, FilterPolicy};
use latentlens::config::ExperimentConfig;
use latentlens::error::{Error, Result};
use latentlens::flow::{FlowField, IntegratorSpec};
use latentlens::gmm::NoiseSchedule;
use latentlens::learn::{
    accuracy_vs_confidence, cross_level_matrix, train_mlp, MlpHead, TrainerKind,
};
use latentlens::manifest::RunManifest;
use latentlens::pool::{
    balance_pool, build_pool, load_pool, save_pool, split_train_test, stratify, SeedPool,
    SeedRecord, Split,
};
use latentlens::presets;
use latentlens::rng::{domain, substream};
use latentlens::structure::{overlay, structure_sweep, Space};
use latentlens::svg;

#[derive(Parser)]
#[command(name = "latentlens", version, about = "Confidence-stratified latent-space analysis for deterministic diffusion on Gaussian-mixture testbeds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the stock reference experiment config to a file.
    Init(InitArgs),
    /// Build, balance, stratify, split and persist the seed pool.
    Pool(RunArgs),
    /// Cross-level train/test accuracy matrix with annotated SVG.
    Heatmap(HeatmapArgs),
    /// Per-level separability metrics, 2D embeddings and the overlay.
    Structure(RunArgs),
    /// Logit-prediction regressor and accuracy-vs-confidence curve.
    Predict(RunArgs),
    /// Confidence-filtered conditional generation.
    Condgen(RunArgs),
    /// Flow-map verification suite (closed-form oracles, density identity,
    /// class transport).
    Verify(RunArgs),
}

#[derive(Args)]
struct InitArgs {
    /// Where to write the config.
    #[arg(long, default_value = "reference.toml")]
    path: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's sampler (ddim|ddpm).
    #[arg(long)]
    sampler: Option<String>,
    /// Re-run stages even when their outputs are current.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Which latent classifier to train per level (mlp|lda).
    #[arg(long, default_value = "mlp")]
    trainer: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    init_workers();
    let outcome = match cli.command {
        Command::Init(args) => cmd_init(&args),
        Command::Pool(args) => Ctx::new(&args).and_then(|ctx| cmd_pool(&ctx)),
        Command::Heatmap(args) => Ctx::new(&args.run).and_then(|ctx| cmd_heatmap(&ctx, &args.trainer)),
        Command::Structure(args) => Ctx::new(&args).and_then(|ctx| cmd_structure(&ctx)),
        Command::Predict(args) => Ctx::new(&args).and_then(|ctx| cmd_predict(&ctx)),
        Command::Condgen(args) => Ctx::new(&args).and_then(|ctx| cmd_condgen(&ctx)),
        Command::Verify(args) => Ctx::new(&args).and_then(|ctx| cmd_verify(&ctx)),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// LATENTLENS_WORKERS caps intra-stage parallelism.
fn init_workers() {
    if let Ok(value) = std::env::var("LATENTLENS_WORKERS") {
        if let Ok(n) = value.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

fn cmd_init(args: &InitArgs) -> Result<ExitCode> {
    if args.path.exists() && !args.force {
        return Err(Error::Config(format!(
            "{} already exists (use --force to overwrite)",
            args.path.display()
        )));
    }
    let cfg = ExperimentConfig::reference();
    fs::write(&args.path, cfg.to_toml()?)?;
    println!("wrote reference config to {}", args.path.display());
    Ok(ExitCode::SUCCESS)
}

struct Ctx {
    cfg: ExperimentConfig,
    digest: String,
    out: PathBuf,
    force: bool,
}

impl Ctx {
    fn new(args: &RunArgs) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&args.config)?;
        if let Some(seed) = args.seed {
            cfg.master_seed = seed;
        }
        if let Some(sampler) = &args.sampler {
            if !matches!(sampler.as_str(), "ddim" | "ddpm") {
                return Err(Error::Config(format!(
                    "unknown sampler {sampler:?} (expected ddim|ddpm)"
                )));
            }
            cfg.pool.sampler = sampler.clone();
        }
        let digest = cfg.digest()?;
        fs::create_dir_all(&args.out)?;
        Ok(Self {
            cfg,
            digest,
            out: args.out.clone(),
            force: args.force,
        })
    }

    fn flow(&self) -> Result<FlowField> {
        FlowField::new(
            self.cfg.build_mixture()?,
            self.cfg.build_schedule()?,
            self.cfg.build_integrator()?,
        )
        .map_err(|e| e.in_stage("flow field construction"))
    }

    fn sampler_tag(&self) -> &str {
        &self.cfg.pool.sampler
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish_stage(&self, stage: &str, outputs: Vec<PathBuf>) -> Result<()> {
        let mut manifest = RunManifest::load_or_default(&self.out);
        manifest.record_stage(stage, &self.digest, outputs);
        manifest.store(&self.out)
    }
}

/// Loads the pool when its stage is current, otherwise builds the full
/// build→balance→stratify→split pipeline and persists it.
fn ensure_pool(ctx: &Ctx, flow: &FlowField) -> Result<SeedPool> {
    let tag = ctx.sampler_tag().to_string();
    let stage = format!("pool:{tag}");
    let csv = ctx.path(&format!("pool_{tag}.csv"));
    let manifest = RunManifest::load_or_default(&ctx.out);
    if !ctx.force && manifest.stage_is_current(&stage, &ctx.digest, &ctx.out) {
        println!("[{stage}] outputs current, loading {}", csv.display());
        return load_pool(&csv).map_err(|e| e.in_stage(&stage));
    }
    let cfg = &ctx.cfg;
    let master = cfg.master_seed;
    let pool = build_pool(flow, cfg.pool.size, cfg.sampler()?, master, &ctx.digest)
        .map_err(|e| e.in_stage("pool build"))?;
    if pool.provenance.excluded_blowups > 0 {
        println!(
            "[{stage}] excluded {} blown-up trajectories",
            pool.provenance.excluded_blowups
        );
    }
    let pool = balance_pool(&pool, &mut substream(master, domain::BALANCE, 0))
        .map_err(|e| e.in_stage("pool balance"))?;
    let pool = stratify(&pool, cfg.pool.levels).map_err(|e| e.in_stage("pool stratify"))?;
    let pool = split_train_test(
        &pool,
        cfg.pool.test_fraction,
        &mut substream(master, domain::SPLIT, 0),
    )
    .map_err(|e| e.in_stage("pool split"))?;
    save_pool(&pool, &csv).map_err(|e| e.in_stage("pool save"))?;
    let manifest_json = ctx.path(&format!("pool_{tag}.manifest.json"));
    println!(
        "[{stage}] {} records ({} per label), {} levels -> {}",
        pool.len(),
        pool.counts_per_label().first().copied().unwrap_or(0),
        pool.num_levels(),
        csv.display()
    );
    ctx.finish_stage(&stage, vec![csv, manifest_json])?;
    Ok(pool)
}

fn level_train_records(pool: &SeedPool, level: usize) -> Vec<&SeedRecord> {
    pool.records_at_level(level)
        .filter(|r| r.split == Split::Train)
        .collect()
}

fn cmd_pool(ctx: &Ctx) -> Result<ExitCode> {
    let flow = ctx.flow()?;
    let pool = ensure_pool(ctx, &flow)?;
    let counts = pool.counts_per_label();
    println!("per-label counts: {counts:?}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_heatmap(ctx: &Ctx, trainer: &str) -> Result<ExitCode> {
    let kind = match trainer {
        "mlp" => TrainerKind::Mlp,
        "lda" => TrainerKind::Lda,
        other => {
            return Err(Error::Config(format!(
                "unknown trainer {other:?} (expected mlp|lda)"
            )))
        }
    };
    let tag = ctx.sampler_tag().to_string();
    let stage = format!("heatmap:{trainer}:{tag}");
    let csv_path = ctx.path(&format!("heatmap_{trainer}_{tag}.csv"));
    let svg_path = ctx.path(&format!("heatmap_{trainer}_{tag}.svg"));
    let manifest = RunManifest::load_or_default(&ctx.out);
    if !ctx.force && manifest.stage_is_current(&stage, &ctx.digest, &ctx.out) {
        println!("[{stage}] outputs current, skipping");
        return Ok(ExitCode::SUCCESS);
    }
    let flow = ctx.flow()?;
    let pool = ensure_pool(ctx, &flow)?;
    let matrix = cross_level_matrix(&pool, kind, &ctx.cfg.mlp_hyper()?, ctx.cfg.master_seed)
        .map_err(|e| e.in_stage(&stage))?;
    fs::write(&csv_path, matrix.to_csv())?;
    fs::write(&svg_path, svg::emit_heatmap(&matrix)?)?;
    println!(
        "[{stage}] cell(1,1) = {:.3}, cell({l},{l}) = {:.3} -> {}",
        matrix.cell(1, 1),
        matrix.cell(matrix.levels(), matrix.levels()),
        csv_path.display(),
        l = matrix.levels()
    );
    ctx.finish_stage(&stage, vec![csv_path, svg_path])?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_structure(ctx: &Ctx) -> Result<ExitCode> {
    let tag = ctx.sampler_tag().to_string();
    let stage = format!("structure:{tag}");
    let manifest = RunManifest::load_or_default(&ctx.out);
    let metrics_path = ctx.path(&format!("structure_metrics_{tag}.csv"));
    if !ctx.force && manifest.stage_is_current(&stage, &ctx.digest, &ctx.out) {
        println!("[{stage}] outputs current, skipping");
        return Ok(ExitCode::SUCCESS);
    }
    let flow = ctx.flow()?;
    let pool = ensure_pool(ctx, &flow)?;
    let spaces = [Space::Seed, Space::Sample];
    let report = structure_sweep(&pool, &spaces, ctx.cfg.pool.test_fraction, ctx.cfg.master_seed)
        .map_err(|e| e.in_stage(&stage))?;
    let mut outputs = Vec::new();
    fs::write(&metrics_path, report.metrics_csv())?;
    outputs.push(metrics_path.clone());
    let coords_path = ctx.path(&format!("structure_coords_{tag}.csv"));
    fs::write(&coords_path, report.raw_coordinates_csv())?;
    outputs.push(coords_path);
    let classes = pool.provenance.num_classes;
    for space in spaces {
        for level in 1..=pool.num_levels() {
            let points: Vec<_> = report
                .embeddings
                .iter()
                .filter(|p| p.level == level && p.space == space)
                .copied()
                .collect();
            let path = ctx.path(&format!(
                "scatter_{}_level{level:02}_{tag}.svg",
                space.tag()
            ));
            let title = format!("{} space, level {level} ({tag})", space.tag());
            fs::write(&path, svg::emit_scatter(&points, classes, &title)?)?;
            outputs.push(path);
        }
    }
    // overlay: lowest-confidence level onto the level-1 basis, seed space
    let levels = pool.num_levels();
    let level1: Vec<&SeedRecord> = pool.records_at_level(1).collect();
    let level_l: Vec<&SeedRecord> = pool.records_at_level(levels).collect();
    let overlay_report = overlay(&level1, &level_l, Space::Seed).map_err(|e| e.in_stage(&stage))?;
    let overlay_json = ctx.path(&format!("overlay_{tag}.json"));
    fs::write(
        &overlay_json,
        serde_json::to_string_pretty(&overlay_report)
            .map_err(|e| Error::Config(format!("overlay serialization failed: {e}")))?,
    )?;
    outputs.push(overlay_json);
    let overlay_svg = ctx.path(&format!("overlay_{tag}.svg"));
    let title = format!("level {levels} over level 1 ({tag})");
    fs::write(
        &overlay_svg,
        svg::emit_scatter(&overlay_report.points, classes, &title)?,
    )?;
    outputs.push(overlay_svg);
    for m in &report.metrics {
        println!(
            "[{stage}] level {} {}: lda_score {:.4}, pca_variance {:.4}",
            m.level,
            m.space.tag(),
            m.lda_score,
            m.pca_variance
        );
    }
    println!(
        "[{stage}] overlay margins: level 1 median {:.4}, level {} median {:.4}",
        overlay_report.level1_margins.median, levels, overlay_report.level_l_margins.median
    );
    ctx.finish_stage(&stage, outputs)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(ctx: &Ctx) -> Result<ExitCode> {
    let tag = ctx.sampler_tag().to_string();
    let stage = format!("predict:{tag}");
    let csv_path = ctx.path(&format!("curve_{tag}.csv"));
    let svg_path = ctx.path(&format!("curve_{tag}.svg"));
    let manifest = RunManifest::load_or_default(&ctx.out);
    if !ctx.force && manifest.stage_is_current(&stage, &ctx.digest, &ctx.out) {
        println!("[{stage}] outputs current, skipping");
        return Ok(ExitCode::SUCCESS);
    }
    let flow = ctx.flow()?;
    let pool = ensure_pool(ctx, &flow)?;
    let train = level_train_records(&pool, 1);
    let regressor = train_mlp(
        &train,
        MlpHead::Regressor,
        &ctx.cfg.mlp_hyper()?,
        &mut substream(ctx.cfg.master_seed, domain::PREDICT_TRAIN, 0),
    )
    .map_err(|e| e.in_stage(&stage))?;
    let curve = accuracy_vs_confidence(
        &regressor,
        &flow,
        ctx.cfg.predict.fresh_seeds,
        ctx.cfg.predict.bins,
        ctx.cfg.master_seed,
    )
    .map_err(|e| e.in_stage(&stage))?;
    fs::write(&csv_path, curve.to_csv())?;
    fs::write(&svg_path, svg::emit_curve(&curve)?)?;
    if curve.merged_bins > 0 {
        println!("[{stage}] note: {} degenerate bins merged", curve.merged_bins);
    }
    println!(
        "[{stage}] {} bins, Spearman(bin, accuracy) = {:.3} -> {}",
        curve.bins.len(),
        curve.spearman_bin_accuracy(),
        csv_path.display()
    );
    ctx.finish_stage(&stage, vec![csv_path, svg_path])?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_condgen(ctx: &Ctx) -> Result<ExitCode> {
    let tag = ctx.sampler_tag().to_string();
    let stage = format!("condgen:{tag}");
    let report_path = ctx.path(&format!("condgen_report_{tag}.json"));
    let samples_path = ctx.path(&format!("condgen_samples_{tag}.csv"));
    let manifest = RunManifest::load_or_default(&ctx.out);
    if !ctx.force && manifest.stage_is_current(&stage, &ctx.digest, &ctx.out) {
        println!("[{stage}] outputs current, skipping");
        return Ok(ExitCode::SUCCESS);
    }
    let flow = ctx.flow()?;
    let pool = ensure_pool(ctx, &flow)?;
    let fc = &ctx.cfg.filter;
    let train = level_train_records(&pool, 1);
    let latent = train_mlp(
        &train,
        MlpHead::Classifier,
        &ctx.cfg.mlp_hyper()?,
        &mut substream(ctx.cfg.master_seed, domain::CONDGEN_TRAIN, 0),
    )
    .map_err(|e| e.in_stage(&stage))?;
    let policy = match fc.threshold {
        Some(threshold) => FilterPolicy::new(fc.target_class, threshold, fc.max_draws)?,
        None => FilterPolicy::from_pool_boundary(&pool, fc.target_class, fc.max_draws)?,
    };
    let (report, samples) =
        generate_conditional(&flow, &latent, &policy, fc.requested, ctx.cfg.master_seed)
            .map_err(|e| e.in_stage(&stage))?;
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?,
    )?;
    fs::write(&samples_path, samples_csv(&report, &samples))?;
    println!(
        "[{stage}] class {} @ tau {:.4}: accepted {}/{} drawn, verified accuracy {:.4}",
        report.target_class, report.threshold, report.n_accepted, report.n_drawn,
        report.verified_accuracy
    );
    ctx.finish_stage(&stage, vec![report_path, samples_path])?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct VerifyCheck {
    name: String,
    value: f64,
    threshold: Option<f64>,
    pass: bool,
}

fn gated(name: &str, value: f64, threshold: f64) -> VerifyCheck {
    VerifyCheck {
        name: name.into(),
        value,
        threshold: Some(threshold),
        pass: value <= threshold,
    }
}

fn reported(name: &str, value: f64) -> VerifyCheck {
    VerifyCheck {
        name: name.into(),
        value,
        threshold: None,
        pass: true,
    }
}

fn cmd_verify(ctx: &Ctx) -> Result<ExitCode> {
    let master = ctx.cfg.master_seed;
    let mut checks = Vec::new();

    // closed-form oracles on fixed mixtures, rk4/256
    let spec = IntegratorSpec::rk4(256)?;
    let identity = FlowField::new(
        presets::standard_normal_mixture(2),
        NoiseSchedule::constant(1.0, 1.0)?,
        spec,
    )?;
    let mut worst = 0.0f64;
    for i in 0..5 {
        let x0 = latentlens::rng::standard_normal_vector(
            &mut substream(master, domain::VERIFY, 1000 + i),
            2,
        );
        let traj = identity.integrate_forward(&x0)?;
        worst = worst
            .max((traj.final_state() - &x0).norm())
            .max(traj.logdet.abs());
    }
    checks.push(gated("identity_flow_error", worst, 1e-10));

    let translation = FlowField::new(
        latentlens::gmm::MixtureModel::isotropic(
            vec![DVector::from_vec(vec![3.0, 0.0])],
            1.0,
            vec![0],
            1,
        )?,
        NoiseSchedule::constant(1.0, 1.0)?,
        spec,
    )?;
    let shift = (1.0 - (-0.5f64).exp()) * 3.0;
    let mut worst = 0.0f64;
    for i in 0..5 {
        let x0 = latentlens::rng::standard_normal_vector(
            &mut substream(master, domain::VERIFY, 2000 + i),
            2,
        );
        let traj = translation.integrate_forward(&x0)?;
        let expected = DVector::from_vec(vec![x0[0] - shift, x0[1]]);
        worst = worst.max((traj.final_state() - expected).norm());
    }
    checks.push(gated("translation_flow_error", worst, 1e-6));

    let scaling = FlowField::new(
        latentlens::gmm::MixtureModel::isotropic(vec![DVector::zeros(2)], 4.0, vec![0], 1)?,
        NoiseSchedule::constant(1.0, 1.0)?,
        spec,
    )?;
    let factor = (4.0 * (-1.0f64).exp() + 1.0 - (-1.0f64).exp()).sqrt() / 2.0;
    let mut worst_state = 0.0f64;
    let mut worst_logdet = 0.0f64;
    for i in 0..5 {
        let x0 = latentlens::rng::standard_normal_vector(
            &mut substream(master, domain::VERIFY, 3000 + i),
            2,
        );
        let traj = scaling.integrate_forward(&x0)?;
        worst_state = worst_state.max((traj.final_state() - &x0 * factor).norm());
        worst_logdet = worst_logdet.max((traj.logdet - 2.0 * factor.ln()).abs());
    }
    checks.push(gated("scaling_flow_error", worst_state, 1e-5));
    checks.push(gated("scaling_logdet_error", worst_logdet, 1e-5));

    // density identity on the config mixture at rk4/512
    let mixture = ctx.cfg.build_mixture()?;
    let schedule = ctx.cfg.build_schedule()?;
    let identity_flow = FlowField::new(mixture.clone(), schedule, IntegratorSpec::rk4(512)?)?;
    let points = mixture.sample_data(&mut substream(master, domain::VERIFY, 0), 100);
    let mut worst_gap = 0.0f64;
    for (x0, _) in &points {
        worst_gap = worst_gap.max(identity_flow.verify_density_identity(x0)?.abs_err);
    }
    checks.push(gated("density_identity_gap", worst_gap, 1e-3));

    // class transport and round trip at the config integrator, reported
    let config_flow = ctx.flow()?;
    let transport = config_flow.verify_class_transport(500, &mut substream(master, domain::VERIFY, 1))?;
    checks.push(reported(
        "roundtrip_class_agreement",
        transport.roundtrip_class_agreement,
    ));
    checks.push(reported("latent_nn_purity", transport.latent_nn_purity));
    let mut worst_rt = 0.0f64;
    for (x0, _) in points.iter().take(100) {
        let z = config_flow.transport_to_latent(x0)?;
        let back = config_flow.generate(&z)?;
        worst_rt = worst_rt.max((&back - x0).norm());
    }
    checks.push(reported("roundtrip_reconstruction_error", worst_rt));

    let all_pass = checks.iter().all(|c| c.pass);
    for c in &checks {
        match c.threshold {
            Some(t) => println!(
                "[verify] {}: {} = {:.3e} (tol {:.0e})",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                t
            ),
            None => {
                let value = if c.value == 0.0 || c.value.abs() >= 1e-3 {
                    format!("{:.6}", c.value)
                } else {
                    format!("{:.3e}", c.value)
                };
                println!("[verify] INFO: {} = {value}", c.name);
            }
        }
    }
    let path = ctx.path("verify.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&checks)
            .map_err(|e| Error::Config(format!("verify serialization failed: {e}")))?,
    )?;
    if all_pass {
        ctx.finish_stage("verify", vec![path])?;
        Ok(ExitCode::SUCCESS)
    } else {
        println!("[verify] verification FAILED");
        Ok(ExitCode::from(2))
    }
}
