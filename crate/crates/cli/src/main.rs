//! `corrpose`: template generation, synthetic estimation and evaluation,
//! gradient checks and noise sweeps.
//!
//! Exit codes: 0 on success, 1 when a run misses its threshold, 2 on usage,
//! configuration or I/O errors.

// `!(x > 0.0)` deliberately rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod bop;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use corrpose::benchmark::{
    build_objects, run_benchmark_with, scene_intrinsics, scene_pose, BenchmarkConfig, BenchmarkReport,
};
use corrpose::eval::{average_recall, evaluate_pose, EvalSample, MetricModel, PoseError, RecallSummary};
use corrpose::mesh::{builtin, load_mesh};
use corrpose::mock::Scene;
use corrpose::pnp::gradcheck::{gradcheck_with, random_problem};
use corrpose::template::{build_templates, TemplateConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use bop::BopRow;
use plot::Series;

#[derive(Parser)]
#[command(name = "corrpose", version, about = "Correspondence-based object pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the 42 templates of a mesh into a directory.
    GenTemplates(GenTemplatesArgs),
    /// Run the pipeline on synthetic scenes and write BOP results and traces.
    Estimate(EstimateArgs),
    /// Score a BOP results file against the scenes of a config.
    Evaluate(EvaluateArgs),
    /// Compare the implicit PnP gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the benchmark over a grid of noise values.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenTemplatesArgs {
    /// Mesh file (.obj or .ply).
    mesh: PathBuf,
    /// Output directory.
    out: PathBuf,
    /// Factor applied to the mesh coordinates to obtain meters.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Template config JSON (size, focal, distance, fill).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Run config JSON.
    config: PathBuf,
    /// Overrides the config seed (scene and noise streams).
    #[arg(long, env = "CORRPOSE_SEED")]
    seed: Option<u64>,
    /// Overrides the number of scenes.
    #[arg(long)]
    scenes: Option<usize>,
    /// Overrides the number of hypotheses.
    #[arg(long)]
    hypotheses: Option<usize>,
    /// Worker threads (0 uses every core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Fill the CSV time column with per-scene wall-clock seconds.
    #[arg(long)]
    record_time: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// BOP results CSV.
    results: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Exit with 1 when the AR falls below this value.
    #[arg(long)]
    min_ar: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, env = "CORRPOSE_SEED", default_value_t = 0)]
    seed: u64,
    /// Number of random problems.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Support pixels checked per problem.
    #[arg(long, default_value_t = 6)]
    pixels: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    /// Scales the analytic flow Jacobian before comparing (negative control).
    #[arg(long, hide = true)]
    corrupt_jacobian: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Exit with 1 when AR rises by more than 0.02 between grid points.
    #[arg(long)]
    check_monotone: bool,
}

/// Noise parameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SweepParameter {
    ClassFlipProb,
    OffsetSigma,
    FlowSigmaB,
    OcclusionFrac,
    Hypotheses,
}

impl SweepParameter {
    fn name(&self) -> &'static str {
        match self {
            Self::ClassFlipProb => "class_flip_prob",
            Self::OffsetSigma => "offset_sigma",
            Self::FlowSigmaB => "flow_sigma_b",
            Self::OcclusionFrac => "occlusion_frac",
            Self::Hypotheses => "hypotheses",
        }
    }

    fn apply(&self, cfg: &mut BenchmarkConfig, v: f64) {
        match self {
            Self::ClassFlipProb => cfg.noise.class_flip_prob = v,
            Self::OffsetSigma => cfg.noise.offset_sigma = v,
            Self::FlowSigmaB => cfg.noise.flow_sigma_b = v,
            Self::OcclusionFrac => cfg.noise.occlusion_frac = v,
            Self::Hypotheses => cfg.hypotheses = v as usize,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepConfig {
    #[serde(default)]
    base: BenchmarkConfig,
    parameter: SweepParameter,
    values: Vec<f64>,
}

enum Failure {
    /// Bad usage, invalid config or I/O problem.
    Usage(anyhow::Error),
    /// The run completed but missed its threshold.
    Threshold(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

impl From<corrpose::Error> for Failure {
    fn from(e: corrpose::Error) -> Self {
        Failure::Usage(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        anyhow!("invalid config {}: field `{field}`: {}", path.display(), e.into_inner())
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

impl RunArgs {
    fn apply(&self, cfg: &mut BenchmarkConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.noise.seed = seed;
        }
        if let Some(n) = self.scenes {
            cfg.scenes = n;
        }
        if let Some(n) = self.hypotheses {
            cfg.hypotheses = n;
        }
    }

    fn load(&self) -> anyhow::Result<BenchmarkConfig> {
        let mut cfg: BenchmarkConfig = read_json(&self.config)?;
        self.apply(&mut cfg);
        cfg.validate()
            .with_context(|| format!("invalid config {}", self.config.display()))?;
        Ok(cfg)
    }

    fn pool(&self) -> anyhow::Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| anyhow!("cannot start {} worker threads: {e}", self.jobs))
    }
}

fn benchmark(run: &RunArgs, cfg: &BenchmarkConfig) -> Result<BenchmarkReport, Failure> {
    let pool = run.pool()?;
    Ok(pool.install(|| {
        let objects = build_objects(cfg)?;
        run_benchmark_with(&objects, cfg)
    })?)
}

fn gen_templates(args: &GenTemplatesArgs) -> Outcome {
    let cfg: TemplateConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TemplateConfig::default(),
    };
    if !(args.scale > 0.0) {
        return Err(Failure::Usage(anyhow!("--scale must be > 0")));
    }
    let mesh = load_mesh(&args.mesh, args.scale)?;
    let id = args
        .mesh
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("mesh")
        .to_string();
    let set = build_templates(&mesh, &id, &cfg)?;
    set.save(&args.out)?;
    println!(
        "wrote {} templates of {id} to {}",
        set.templates.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TimingRecord {
    scene_id: u64,
    coarse_s: f64,
    refine_s: f64,
    select_s: f64,
    evaluate_s: f64,
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    config: &'a BenchmarkConfig,
    ar: f64,
    coarse: &'a RecallSummary,
    refined: &'a RecallSummary,
    failures: usize,
    lm_monotone: bool,
}

fn estimate(args: &EstimateArgs) -> Outcome {
    let cfg = args.run.load()?;
    let report = benchmark(&args.run, &cfg)?;
    create_dir(&args.out)?;

    let rows: Vec<BopRow> = report
        .scenes
        .iter()
        .filter_map(|s| {
            let h = &s.hypotheses[s.selected?];
            let obj = cfg.objects.iter().position(|o| *o == s.object).unwrap_or(0) as u64 + 1;
            Some(BopRow {
                scene_id: s.scene_id,
                im_id: 0,
                obj_id: obj,
                score: s.selector_score.unwrap_or(h.similarity),
                pose: s.final_pose?,
                time: if args.record_time {
                    s.timing.total().as_secs_f64()
                } else {
                    -1.0
                },
            })
        })
        .collect();
    bop::write(&args.out.join("results.csv"), &rows)?;
    write_json(&args.out.join("trace.json"), &report.scenes)?;
    write_json(
        &args.out.join("report.json"),
        &ReportSummary {
            config: &cfg,
            ar: report.ar,
            coarse: &report.coarse,
            refined: &report.refined,
            failures: report.failures,
            lm_monotone: report.lm_monotone(),
        },
    )?;
    let timing: Vec<TimingRecord> = report
        .scenes
        .iter()
        .map(|s| TimingRecord {
            scene_id: s.scene_id,
            coarse_s: s.timing.coarse.as_secs_f64(),
            refine_s: s.timing.refine.as_secs_f64(),
            select_s: s.timing.select.as_secs_f64(),
            evaluate_s: s.timing.evaluate.as_secs_f64(),
        })
        .collect();
    write_json(&args.out.join("timing.json"), &timing)?;
    let mssd: Vec<f64> = report.scenes.iter().map(|s| s.final_error.mssd).collect();
    write_text(
        &args.out.join("mssd_histogram.svg"),
        &plot::histogram("MSSD of the final estimates", "MSSD (m)", &mssd, 20),
    )?;

    for s in report.scenes.iter().filter(|s| s.failed()) {
        let why: Vec<&str> = s.hypotheses.iter().filter_map(|h| h.error.as_deref()).collect();
        eprintln!("scene {} failed: {}", s.scene_id, why.join("; "));
    }
    println!(
        "{} scenes, {} failed, AR {:.4} (VSD {:.4}, MSSD {:.4}, MSPD {:.4}), coarse AR {:.4}",
        report.scenes.len(),
        report.failures,
        report.ar,
        report.refined.ar_vsd,
        report.refined.ar_mssd,
        report.refined.ar_mspd,
        report.coarse.ar
    );
    if report.failures == report.scenes.len() {
        return Err(Failure::Threshold("every scene failed".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct SceneEvaluation {
    scene_id: u64,
    object: String,
    error: PoseError,
}

#[derive(Serialize)]
struct Evaluation {
    recall: RecallSummary,
    missing: usize,
    scenes: Vec<SceneEvaluation>,
}

fn evaluate(args: &EvaluateArgs) -> Outcome {
    let cfg = args.run.load()?;
    let rows = bop::read(&args.results)?;
    let models: Vec<MetricModel> = cfg
        .objects
        .iter()
        .map(|n| MetricModel::new(builtin(n).expect("validated object name")))
        .collect();
    let k = scene_intrinsics(&cfg);
    let pool = args.run.pool()?;
    let scenes: Vec<SceneEvaluation> = pool.install(|| {
        use rayon::prelude::*;
        (0..cfg.scenes as u64)
            .into_par_iter()
            .map(|id| -> corrpose::Result<SceneEvaluation> {
                let obj = id as usize % models.len();
                let model = &models[obj];
                let gt = scene_pose(&cfg, &model.mesh, id);
                let scene = Scene::render(id, &model.mesh, gt, k, cfg.image_size)?;
                let estimate = rows
                    .iter()
                    .filter(|r| r.scene_id == id && r.obj_id == obj as u64 + 1)
                    .max_by(|a, b| a.score.total_cmp(&b.score));
                let error = estimate
                    .and_then(|r| evaluate_pose(&r.pose, &gt, model, &k, &scene.depth).ok())
                    .unwrap_or_else(PoseError::failure);
                Ok(SceneEvaluation {
                    scene_id: id,
                    object: cfg.objects[obj].clone(),
                    error,
                })
            })
            .collect::<corrpose::Result<Vec<_>>>()
    })?;
    let samples: Vec<EvalSample> = scenes
        .iter()
        .map(|s| EvalSample {
            error: s.error.clone(),
            diameter: models[cfg.objects.iter().position(|o| *o == s.object).unwrap()].diameter(),
        })
        .collect();
    let recall = average_recall(&samples, cfg.image_size)?;
    let missing = scenes.iter().filter(|s| s.error.is_failure()).count();
    create_dir(&args.out)?;
    let mssd: Vec<f64> = scenes.iter().map(|s| s.error.mssd).collect();
    let mspd: Vec<f64> = scenes.iter().map(|s| s.error.mspd).collect();
    write_text(
        &args.out.join("mssd_histogram.svg"),
        &plot::histogram("MSSD", "MSSD (m)", &mssd, 20),
    )?;
    write_text(
        &args.out.join("mspd_histogram.svg"),
        &plot::histogram("MSPD", "MSPD (px)", &mspd, 20),
    )?;
    println!(
        "AR {:.4} (VSD {:.4}, MSSD {:.4}, MSPD {:.4}), {missing} of {} scenes without a valid estimate",
        recall.ar,
        recall.ar_vsd,
        recall.ar_mssd,
        recall.ar_mspd,
        scenes.len()
    );
    let ar = recall.ar;
    write_json(
        &args.out.join("evaluation.json"),
        &Evaluation {
            recall,
            missing,
            scenes,
        },
    )?;
    match args.min_ar {
        Some(min) if ar < min => Err(Failure::Threshold(format!("AR {ar:.4} is below {min}"))),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct WorstCase {
    seed: u64,
    max_rel_flow: f64,
    max_rel_weight: f64,
    worst_pixel: usize,
    pose_init: corrpose::Pose,
}

fn run_gradcheck(args: &GradcheckArgs) -> Outcome {
    if args.count == 0 {
        return Err(Failure::Usage(anyhow!("--count must be at least 1")));
    }
    if args.pixels == 0 {
        return Err(Failure::Usage(anyhow!("--pixels must be at least 1")));
    }
    let mut worst: Option<WorstCase> = None;
    for i in 0..args.count as u64 {
        let seed = args.seed.wrapping_add(i);
        let problem = random_problem(seed);
        let corrupt = args.corrupt_jacobian;
        let c = gradcheck_with(&problem, args.pixels, |j| {
            if corrupt {
                j.d_pose_d_flow *= 1.05;
            }
        })
        .map_err(|e| Failure::Threshold(format!("problem {seed}: {e}")))?;
        if worst
            .as_ref()
            .is_none_or(|w| c.max_rel() > w.max_rel_flow.max(w.max_rel_weight))
        {
            worst = Some(WorstCase {
                seed,
                max_rel_flow: c.max_rel_flow,
                max_rel_weight: c.max_rel_weight,
                worst_pixel: c.worst_pixel,
                pose_init: problem.pose_init,
            });
        }
    }
    let w = worst.expect("count >= 1");
    let max = w.max_rel_flow.max(w.max_rel_weight);
    println!("max relative error {max:.3e} over {} problems", args.count);
    if max < args.tolerance {
        Ok(())
    } else {
        eprintln!(
            "worst problem:\n{}",
            serde_json::to_string_pretty(&w).map_err(anyhow::Error::from)?
        );
        Err(Failure::Threshold(format!(
            "relative error {max:.3e} exceeds {}",
            args.tolerance
        )))
    }
}

fn sweep(args: &SweepArgs) -> Outcome {
    let mut sc: SweepConfig = read_json(&args.run.config)?;
    if sc.values.is_empty() {
        return Err(Failure::Usage(anyhow!(
            "{}: values must not be empty",
            args.run.config.display()
        )));
    }
    args.run.apply(&mut sc.base);
    let mut rows = Vec::with_capacity(sc.values.len());
    for &v in &sc.values {
        let mut cfg = sc.base.clone();
        sc.parameter.apply(&mut cfg, v);
        cfg.validate()
            .with_context(|| format!("{} = {v}", sc.parameter.name()))?;
        let report = benchmark(&args.run, &cfg)?;
        println!(
            "{} = {v}: AR {:.4}, coarse AR {:.4}",
            sc.parameter.name(),
            report.ar,
            report.coarse.ar
        );
        rows.push((v, report));
    }
    create_dir(&args.out)?;
    let path = args.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record([
        sc.parameter.name(),
        "ar",
        "ar_vsd",
        "ar_mssd",
        "ar_mspd",
        "coarse_ar",
        "failures",
    ])
    .map_err(anyhow::Error::from)?;
    for (v, r) in &rows {
        w.write_record([
            format!("{v}"),
            format!("{}", r.ar),
            format!("{}", r.refined.ar_vsd),
            format!("{}", r.refined.ar_mssd),
            format!("{}", r.refined.ar_mspd),
            format!("{}", r.coarse.ar),
            r.failures.to_string(),
        ])
        .map_err(anyhow::Error::from)?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    let series = vec![
        Series {
            label: "refined".into(),
            points: rows.iter().map(|(v, r)| (*v, r.ar)).collect(),
        },
        Series {
            label: "coarse".into(),
            points: rows.iter().map(|(v, r)| (*v, r.coarse.ar)).collect(),
        },
    ];
    write_text(
        &args.out.join("sweep.svg"),
        &plot::line_chart("Average Recall", sc.parameter.name(), "AR", (0.0, 1.0), &series),
    )?;
    let monotone = rows.windows(2).all(|w| w[1].1.ar <= w[0].1.ar + 0.02);
    println!("AR non-increasing within 0.02: {monotone}");
    if rows.iter().all(|(_, r)| r.failures == r.scenes.len()) {
        return Err(Failure::Threshold("every scene failed at every grid point".into()));
    }
    if args.check_monotone && !monotone {
        return Err(Failure::Threshold("AR increased along the sweep".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenTemplates(a) => gen_templates(a),
        Command::Estimate(a) => estimate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Threshold(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
