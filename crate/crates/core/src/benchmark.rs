//! Synthetic benchmark: seeded scenes pushed through the full pipeline with
//! oracle predictors, scored with the BOP metrics.

use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::{decode_matches, similarity_score, template_point, top_n, View, PATCH};
use crate::error::{Error, Result};
use crate::eval::{
    average_recall, evaluate_pose, symmetric_pose_error, EvalSample, MetricModel, PoseError, RecallSummary,
};
use crate::flow::{fuse_confidence, rgbd_pose, RgbdConfig, DEFAULT_RADIUS};
use crate::geom::{random_rotation, Intrinsics, Pose, Vec3};
use crate::mesh::{builtin, Mesh};
use crate::mock::{mock_coarse, mock_refiner, selector_scores, stream_rng, NoiseModel, Scene};
use crate::pnp::{ransac_pnp, refine_pose_with, Correspondence, RansacConfig, RefineProblem, SolverConfig};
use crate::template::{build_templates, Template, TemplateConfig, TemplateSet};

const SCENE_STREAM: u64 = 3 << 32;
const RANSAC_STREAM: u64 = 4 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    /// Builtin object names; scene `s` shows object `s % objects.len()`.
    pub objects: Vec<String>,
    pub scenes: usize,
    /// Number of coarse hypotheses refined per scene.
    pub hypotheses: usize,
    pub refine_rounds: usize,
    pub noise: NoiseModel,
    pub seed: u64,
    /// Query image side (pixels); the camera shares the template focal length.
    pub image_size: u32,
    /// Range of the fraction of the image spanned by the object.
    pub fill: [f64; 2],
    pub templates: TemplateConfig,
    pub ransac: RansacConfig,
    pub solver: SolverConfig,
    /// Flow radius of the confidence fusion (pixels).
    pub flow_radius: f64,
    /// Use the query depth and the rigid-fit update instead of the PnP update.
    pub use_depth: bool,
    pub rgbd: RgbdConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            objects: vec!["cube".into(), "icosphere".into(), "l_bracket".into()],
            scenes: 50,
            hypotheses: 1,
            refine_rounds: 2,
            noise: NoiseModel::default(),
            seed: 0,
            image_size: 224,
            fill: [0.5, 0.8],
            templates: TemplateConfig::default(),
            ransac: RansacConfig::default(),
            solver: SolverConfig::default(),
            flow_radius: DEFAULT_RADIUS,
            use_depth: false,
            rgbd: RgbdConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::InvalidParameter(
                "objects: at least one object is required".into(),
            ));
        }
        if let Some(name) = self.objects.iter().find(|n| builtin(n).is_none()) {
            return Err(Error::InvalidParameter(format!(
                "objects: unknown builtin {name:?} (expected cube, icosphere or l_bracket)"
            )));
        }
        if self.scenes == 0 {
            return Err(Error::InvalidParameter("scenes: must be at least 1".into()));
        }
        if self.hypotheses == 0 {
            return Err(Error::InvalidParameter("hypotheses: must be at least 1".into()));
        }
        if self.image_size < PATCH || !self.image_size.is_multiple_of(PATCH) {
            return Err(Error::InvalidParameter(format!(
                "image_size: must be a positive multiple of {PATCH}"
            )));
        }
        if self.templates.size != self.image_size {
            return Err(Error::InvalidParameter("templates.size: must equal image_size".into()));
        }
        if !(0.0 < self.fill[0] && self.fill[0] <= self.fill[1] && self.fill[1] < 1.0) {
            return Err(Error::InvalidParameter("fill: expected 0 < min <= max < 1".into()));
        }
        if !(self.flow_radius > 0.0) {
            return Err(Error::InvalidParameter("flow_radius: must be > 0".into()));
        }
        self.noise.validate()
    }
}

/// A mesh with its templates and metric data.
#[derive(Clone, Debug)]
pub struct ObjectModel {
    pub name: String,
    pub templates: TemplateSet,
    pub metric: MetricModel,
}

impl ObjectModel {
    pub fn new(name: &str, mesh: Mesh, cfg: &TemplateConfig) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            templates: build_templates(&mesh, name, cfg)?,
            metric: MetricModel::new(mesh),
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.metric.mesh
    }
}

/// Wall-clock time per pipeline stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub coarse: Duration,
    pub refine: Duration,
    pub select: Duration,
    pub evaluate: Duration,
}

impl StageTiming {
    pub fn total(&self) -> Duration {
        self.coarse + self.refine + self.select + self.evaluate
    }

    fn add(&mut self, other: &StageTiming) {
        self.coarse += other.coarse;
        self.refine += other.refine;
        self.select += other.select;
        self.evaluate += other.evaluate;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisTrace {
    pub template: usize,
    pub similarity: f64,
    pub coarse_pose: Option<Pose>,
    pub inliers: usize,
    pub refined_pose: Option<Pose>,
    /// Objective per solver iteration, one list per refinement round.
    pub objectives: Vec<Vec<f64>>,
    /// Whether every accepted LM step decreased the objective.
    pub lm_monotone: bool,
    pub selector_score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene_id: u64,
    pub object: String,
    pub gt_pose: Pose,
    /// Similarity score of every template.
    pub scores: Vec<f64>,
    pub hypotheses: Vec<HypothesisTrace>,
    /// Index into `hypotheses` of the selected estimate.
    pub selected: Option<usize>,
    pub final_pose: Option<Pose>,
    pub selector_score: Option<f64>,
    pub coarse_error: PoseError,
    pub final_error: PoseError,
    /// Symmetry-aware rotation error of the final estimate (degrees).
    pub rotation_error_deg: Option<f64>,
    /// Symmetry-aware translation error of the final estimate (meters).
    pub translation_error: Option<f64>,
    pub diameter: f64,
    #[serde(skip)]
    pub timing: StageTiming,
}

impl SceneResult {
    pub fn failed(&self) -> bool {
        self.final_pose.is_none()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub scenes: Vec<SceneResult>,
    /// Recall of the top-1 coarse estimates.
    pub coarse: RecallSummary,
    /// Recall of the refined, selected estimates.
    pub refined: RecallSummary,
    pub ar: f64,
    pub failures: usize,
    #[serde(skip)]
    pub timing: StageTiming,
}

impl BenchmarkReport {
    /// Every LM step accepted in any refinement decreased its objective.
    pub fn lm_monotone(&self) -> bool {
        self.scenes.iter().flat_map(|s| &s.hypotheses).all(|h| h.lm_monotone)
    }
}

/// Query camera for the benchmark image size and template focal length.
pub fn scene_intrinsics(cfg: &BenchmarkConfig) -> Intrinsics {
    let c = cfg.image_size as f64 / 2.0;
    Intrinsics {
        fx: cfg.templates.focal,
        fy: cfg.templates.focal,
        cx: c,
        cy: c,
    }
}

/// Ground-truth pose of scene `id`: uniform rotation, a distance at which
/// the bounding sphere spans a random fraction of the image, and a small
/// lateral offset.
pub fn scene_pose(cfg: &BenchmarkConfig, mesh: &Mesh, id: u64) -> Pose {
    let mut rng = stream_rng(cfg.seed, id, SCENE_STREAM);
    let rotation = random_rotation(&mut rng);
    let fill = rng.random_range(cfg.fill[0]..=cfg.fill[1]);
    let half = fill * cfg.image_size as f64 / 2.0;
    let r = mesh.bounding_radius();
    let z = r * (1.0 + (cfg.templates.focal / half).powi(2)).sqrt();
    let margin = (1.0 - fill) * cfg.image_size as f64 / 2.0;
    let shift = 0.5 * margin * z / cfg.templates.focal;
    let x = rng.random_range(-shift..=shift);
    let y = rng.random_range(-shift..=shift);
    Pose::new(rotation, Vec3::new(x, y, z))
}

fn template_view(t: &Template) -> View<'_> {
    View {
        depth: &t.depth,
        pose: t.pose(),
        k: &t.intrinsics,
    }
}

/// Coarse pose from one template: decode the oracle output, lift template
/// pixels to model points and solve PnP with RANSAC.
fn coarse_hypothesis(scene: &Scene, t: &Template, cfg: &BenchmarkConfig, index: usize) -> Result<(Pose, usize)> {
    let pred = mock_coarse(scene, t, &cfg.noise)?;
    let matches = decode_matches(&pred.classes, &pred.offsets, PATCH)?;
    let corr: Vec<Correspondence> = matches
        .matches
        .iter()
        .filter_map(|m| {
            template_point(template_view(t), &m.target).map(|x| Correspondence {
                point3d: x,
                point2d: m.query,
                weight: m.weight,
            })
        })
        .collect();
    let ransac = RansacConfig {
        seed: stream_rng(cfg.seed, scene.id, RANSAC_STREAM | index as u64).random(),
        ..cfg.ransac
    };
    let out = ransac_pnp(&corr, &scene.k, &ransac)?;
    Ok((out.pose, out.inlier_count()))
}

fn refine_hypothesis(
    scene: &Scene,
    mesh: &Mesh,
    start: Pose,
    cfg: &BenchmarkConfig,
    index: usize,
    trace: &mut HypothesisTrace,
) -> Result<Pose> {
    let mut pose = start;
    for round in 0..cfg.refine_rounds {
        let stream = (index * cfg.refine_rounds + round) as u64;
        let pred = mock_refiner(scene, mesh, &pose, &cfg.noise, stream)?;
        if cfg.use_depth {
            pose = rgbd_pose(&pred.flow, &scene.depth, &pred.render, &scene.k, &pose, &cfg.rgbd)?;
            continue;
        }
        let problem = RefineProblem {
            pose_init: pose,
            confidence: fuse_confidence(&pred.flow, cfg.flow_radius)?,
            flow: pred.flow.mu,
            depth_r: pred.render,
            k: scene.k,
        };
        let out = refine_pose_with(&problem, &cfg.solver)?;
        trace.lm_monotone &= out.trace.lm_monotone();
        trace.objectives.push(out.trace.objectives());
        pose = out.pose;
    }
    Ok(pose)
}

/// Runs the full pipeline on one scene. Pipeline errors are recorded in the
/// trace; only scene generation errors are returned.
pub fn run_scene(object: &ObjectModel, cfg: &BenchmarkConfig, id: u64) -> Result<SceneResult> {
    let mesh = object.mesh();
    let k = scene_intrinsics(cfg);
    let gt = scene_pose(cfg, mesh, id);
    let scene = Scene::render(id, mesh, gt, k, cfg.image_size)?;
    let mut timing = StageTiming::default();

    let clock = Instant::now();
    let scores: Vec<f64> = object
        .templates
        .templates
        .iter()
        .map(|t| mock_coarse(&scene, t, &cfg.noise).map(|p| similarity_score(&p.classes)))
        .collect::<Result<_>>()?;
    let chosen = top_n(&scores, cfg.hypotheses)?;
    let mut hypotheses: Vec<HypothesisTrace> = Vec::with_capacity(chosen.len());
    for (index, &t) in chosen.iter().enumerate() {
        let mut h = HypothesisTrace {
            template: t,
            similarity: scores[t],
            coarse_pose: None,
            inliers: 0,
            refined_pose: None,
            objectives: Vec::new(),
            lm_monotone: true,
            selector_score: None,
            error: None,
        };
        match coarse_hypothesis(&scene, &object.templates.templates[t], cfg, index) {
            Ok((pose, inliers)) => {
                h.coarse_pose = Some(pose);
                h.inliers = inliers;
            }
            Err(e) => h.error = Some(format!("coarse: {e}")),
        }
        hypotheses.push(h);
    }
    timing.coarse = clock.elapsed();

    let clock = Instant::now();
    for (index, h) in hypotheses.iter_mut().enumerate() {
        let Some(start) = h.coarse_pose else {
            continue;
        };
        let mut trace = h.clone();
        match refine_hypothesis(&scene, mesh, start, cfg, index, &mut trace) {
            Ok(pose) => {
                *h = trace;
                h.refined_pose = Some(pose);
            }
            Err(e) => {
                *h = trace;
                h.error = Some(format!("refine: {e}"));
            }
        }
    }
    timing.refine = clock.elapsed();

    let clock = Instant::now();
    let candidates: Vec<(usize, Pose)> = hypotheses
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.refined_pose.map(|p| (i, p)))
        .collect();
    let (selected, selector_score) = if candidates.is_empty() {
        (None, None)
    } else if candidates.len() == 1 {
        (Some(candidates[0].0), None)
    } else {
        let poses: Vec<Pose> = candidates.iter().map(|c| c.1).collect();
        let s = selector_scores(&poses, &scene, mesh)?;
        for ((i, _), score) in candidates.iter().zip(&s) {
            hypotheses[*i].selector_score = Some(*score);
        }
        let best = crate::correspondence::select_template(&s)?;
        (Some(candidates[best].0), Some(s[best]))
    };
    timing.select = clock.elapsed();

    let clock = Instant::now();
    let score = |pose: Option<Pose>| -> PoseError {
        pose.and_then(|p| evaluate_pose(&p, &gt, &object.metric, &k, &scene.depth).ok())
            .unwrap_or_else(PoseError::failure)
    };
    let final_pose = selected.and_then(|i| hypotheses[i].refined_pose);
    let coarse_error = score(hypotheses[0].coarse_pose);
    let final_error = score(final_pose);
    let sym = final_pose.map(|p| symmetric_pose_error(&p, &gt, object.metric.symmetries()));
    timing.evaluate = clock.elapsed();

    Ok(SceneResult {
        scene_id: id,
        object: object.name.clone(),
        gt_pose: gt,
        scores,
        hypotheses,
        selected,
        final_pose,
        selector_score,
        coarse_error,
        final_error,
        rotation_error_deg: sym.map(|(r, _)| r.to_degrees()),
        translation_error: sym.map(|(_, t)| t),
        diameter: object.metric.diameter(),
        timing,
    })
}

/// Builds the configured builtin objects.
pub fn build_objects(cfg: &BenchmarkConfig) -> Result<Vec<ObjectModel>> {
    cfg.objects
        .iter()
        .map(|name| {
            let mesh = builtin(name).ok_or_else(|| Error::InvalidParameter(format!("unknown object {name:?}")))?;
            ObjectModel::new(name, mesh, &cfg.templates)
        })
        .collect()
}

pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let objects = build_objects(cfg)?;
    run_benchmark_with(&objects, cfg)
}

/// Runs every scene (in parallel on the current rayon pool) and reduces
/// the results in scene order.
pub fn run_benchmark_with(objects: &[ObjectModel], cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if objects.is_empty() {
        return Err(Error::Empty("object list"));
    }
    let scenes: Vec<SceneResult> = (0..cfg.scenes as u64)
        .into_par_iter()
        .map(|id| run_scene(&objects[id as usize % objects.len()], cfg, id))
        .collect::<Result<_>>()?;
    let samples = |f: fn(&SceneResult) -> &PoseError| -> Vec<EvalSample> {
        scenes
            .iter()
            .map(|s| EvalSample {
                error: f(s).clone(),
                diameter: s.diameter,
            })
            .collect()
    };
    let coarse = average_recall(&samples(|s| &s.coarse_error), cfg.image_size)?;
    let refined = average_recall(&samples(|s| &s.final_error), cfg.image_size)?;
    let mut timing = StageTiming::default();
    for s in &scenes {
        timing.add(&s.timing);
    }
    Ok(BenchmarkReport {
        config: cfg.clone(),
        failures: scenes.iter().filter(|s| s.failed()).count(),
        ar: refined.ar,
        scenes,
        coarse,
        refined,
        timing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(scenes: usize) -> BenchmarkConfig {
        BenchmarkConfig {
            scenes,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        BenchmarkConfig::default().validate().unwrap();
        let bad = BenchmarkConfig {
            objects: vec!["teapot".into()],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = BenchmarkConfig {
            hypotheses: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<BenchmarkConfig>(r#"{"scenes": 3, "sceens": 4}"#).is_err());
        let cfg: BenchmarkConfig = serde_json::from_str(r#"{"scenes": 3, "noise": {"offset_sigma": 0.1}}"#).unwrap();
        assert_eq!(cfg.scenes, 3);
        assert_eq!(cfg.noise.offset_sigma, 0.1);
    }

    #[test]
    fn scenes_are_in_view_and_deterministic() {
        let cfg = small(1);
        let mesh = builtin("l_bracket").unwrap();
        for id in 0..20 {
            let p = scene_pose(&cfg, &mesh, id);
            assert_eq!(p, scene_pose(&cfg, &mesh, id));
            let k = scene_intrinsics(&cfg);
            let pts = crate::geom::project(&p, &k, &mesh.vertices).unwrap();
            assert!(pts.iter().all(|q| q.x > 0.0 && q.y > 0.0 && q.x < 224.0 && q.y < 224.0));
        }
    }

    #[test]
    fn noiseless_scenes_are_exact() {
        let report = run_benchmark(&small(6)).unwrap();
        assert_eq!(report.failures, 0);
        for s in &report.scenes {
            assert!(s.rotation_error_deg.unwrap() < 1e-6, "{:?}", s.rotation_error_deg);
            assert!(s.translation_error.unwrap() < 1e-8);
        }
        assert!(report.ar > 0.99);
        assert!(report.lm_monotone());
        assert!(
            (report.ar - (report.refined.ar_vsd + report.refined.ar_mssd + report.refined.ar_mspd) / 3.0).abs() < 1e-12
        );
    }

    #[test]
    fn benchmark_is_deterministic_across_thread_counts() {
        let cfg = BenchmarkConfig {
            scenes: 4,
            hypotheses: 2,
            noise: NoiseModel {
                class_flip_prob: 0.2,
                offset_sigma: 0.1,
                flow_sigma_b: 1.0,
                occlusion_frac: 0.2,
                seed: 7,
            },
            ..Default::default()
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = one.install(|| run_benchmark(&cfg)).unwrap();
        let b = run_benchmark(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.scenes.iter().all(|s| s.hypotheses.len() == 2));
    }

    #[test]
    fn report_json_round_trip() {
        let report = run_benchmark(&small(3)).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: BenchmarkReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.scenes.len(), 3);
        assert_eq!(back.ar, report.ar);
    }

    #[test]
    fn rgbd_path_runs() {
        let cfg = BenchmarkConfig {
            scenes: 3,
            use_depth: true,
            ..Default::default()
        };
        let report = run_benchmark(&cfg).unwrap();
        assert_eq!(report.failures, 0);
        assert!(report.ar > 0.99);
    }
}
