//! Oracle stand-ins for the coarse, refiner and selection networks. Each
//! turns ground truth into the tensors the pipeline consumes, with seeded,
//! configurable noise.

use std::collections::VecDeque;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::correspondence::{
    gt_correspondences_from_views, ClassTensor, GtCorrespondences, OffsetTensor, View, PATCH, VISIBILITY_TOL,
};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geom::{backproject_at_depth, DepthMap, Intrinsics, Pose, Vec2};
use crate::mesh::Mesh;
use crate::template::{rasterize, Template};

/// Label smoothing of the mock class tensors.
pub const LABEL_SMOOTHING: f64 = 0.01;
/// Laplace scale reported by a noiseless refiner.
pub const NOISELESS_B: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    pub class_flip_prob: f64,
    /// Offset noise standard deviation, in patches.
    pub offset_sigma: f64,
    /// Laplace scale of the flow noise, in pixels.
    pub flow_sigma_b: f64,
    pub occlusion_frac: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            class_flip_prob: 0.0,
            offset_sigma: 0.0,
            flow_sigma_b: 0.0,
            occlusion_frac: 0.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("class_flip_prob", self.class_flip_prob)?;
        unit("occlusion_frac", self.occlusion_frac)?;
        for (name, v) in [("offset_sigma", self.offset_sigma), ("flow_sigma_b", self.flow_sigma_b)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A synthetic query: the object rendered at its ground-truth pose.
#[derive(Clone, Debug)]
pub struct Scene {
    pub id: u64,
    pub pose: Pose,
    pub k: Intrinsics,
    pub depth: DepthMap,
}

impl Scene {
    pub fn render(id: u64, mesh: &Mesh, pose: Pose, k: Intrinsics, size: u32) -> Result<Self> {
        let depth = rasterize(mesh, &pose, &k, size, size);
        if depth.valid_count() == 0 {
            return Err(Error::ObjectOutOfView);
        }
        Ok(Self { id, pose, k, depth })
    }

    pub fn view(&self) -> View<'_> {
        View {
            depth: &self.depth,
            pose: &self.pose,
            k: &self.k,
        }
    }

    pub fn size(&self) -> u32 {
        self.depth.width
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for one (seed, scene, purpose) triple.
pub fn stream_rng(seed: u64, scene: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ scene) ^ stream))
}

const COARSE_STREAM: u64 = 1 << 32;
const REFINER_STREAM: u64 = 2 << 32;

/// Output of the coarse oracle.
#[derive(Clone, Debug)]
pub struct CoarsePrediction {
    pub classes: ClassTensor,
    pub offsets: OffsetTensor,
    pub gt: GtCorrespondences,
    /// Cells whose class was replaced by a wrong one.
    pub flipped: usize,
    /// Cells forced to no-match by the synthetic occluder.
    pub occluded: usize,
}

/// Grows a 4-connected region over `allowed` cells until it holds `target`
/// cells, restarting from a fresh seed cell whenever a component runs out.
fn grow_region(allowed: &[bool], grid: usize, target: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut region = vec![false; allowed.len()];
    let mut count = 0;
    while count < target {
        let free: Vec<usize> = (0..allowed.len()).filter(|&c| allowed[c] && !region[c]).collect();
        let Some(&start) = free.choose(rng) else {
            break;
        };
        let mut queue = VecDeque::from([start]);
        region[start] = true;
        count += 1;
        while let Some(c) = queue.pop_front() {
            if count >= target {
                break;
            }
            let (i, j) = (c % grid, c / grid);
            let mut next = Vec::with_capacity(4);
            if i > 0 {
                next.push(c - 1);
            }
            if i + 1 < grid {
                next.push(c + 1);
            }
            if j > 0 {
                next.push(c - grid);
            }
            if j + 1 < grid {
                next.push(c + grid);
            }
            for n in next {
                if count < target && allowed[n] && !region[n] {
                    region[n] = true;
                    count += 1;
                    queue.push_back(n);
                }
            }
        }
    }
    region
}

/// Coarse-network oracle for one scene/template pair.
///
/// Starts from the exact correspondences, then occludes a contiguous
/// region of on-object cells, flips classes of the remaining on-object
/// cells to a uniformly drawn wrong class, and perturbs the offsets.
pub fn mock_coarse(scene: &Scene, template: &Template, nm: &NoiseModel) -> Result<CoarsePrediction> {
    nm.validate()?;
    let gt = gt_correspondences_from_views(
        scene.view(),
        View {
            depth: &template.depth,
            pose: template.pose(),
            k: &template.intrinsics,
        },
        PATCH,
    )?;
    let grid = gt.grid as usize;
    let k = crate::correspondence::num_classes(gt.grid);
    let no_match = k - 1;
    let mut rng = stream_rng(nm.seed, scene.id, COARSE_STREAM | template.index as u64);
    let on_object = gt.on_object.iter().filter(|b| **b).count();
    let target = (nm.occlusion_frac * on_object as f64).round() as usize;
    let occluded = grow_region(&gt.on_object, grid, target, &mut rng);

    let normal = (nm.offset_sigma > 0.0).then(|| Normal::new(0.0, nm.offset_sigma).expect("valid sigma"));
    let mut classes = gt.classes.clone();
    let mut offsets = vec![Vec2::zeros(); classes.len()];
    let mut flipped = 0;
    for cell in 0..classes.len() {
        if occluded[cell] {
            classes[cell] = no_match;
            continue;
        }
        if gt.on_object[cell] && nm.class_flip_prob > 0.0 && rng.random_bool(nm.class_flip_prob) {
            let draw = rng.random_range(0..k - 1);
            classes[cell] = if draw >= gt.classes[cell] { draw + 1 } else { draw };
            offsets[cell] = Vec2::new(rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5));
            flipped += 1;
            continue;
        }
        if let Some(o) = gt.offsets[cell] {
            let mut noisy = o;
            if let Some(n) = &normal {
                noisy += Vec2::new(n.sample(&mut rng), n.sample(&mut rng));
            }
            offsets[cell] = noisy.map(|v| v.clamp(-0.5, 0.5));
        }
    }
    Ok(CoarsePrediction {
        classes: ClassTensor::smoothed_one_hot(gt.grid, &classes, LABEL_SMOOTHING)?,
        offsets: OffsetTensor::new(gt.grid, offsets)?,
        occluded: occluded.iter().filter(|b| **b).count(),
        gt,
        flipped,
    })
}

/// Laplace(0, b) draw by inverting the CDF.
pub fn sample_laplace<R: Rng + ?Sized>(b: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(-0.5..0.5);
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Output of the refiner oracle.
#[derive(Clone, Debug)]
pub struct RefinerPrediction {
    pub flow: FlowField,
    /// Depth rendered at the initial pose.
    pub render: DepthMap,
}

/// Refiner oracle: renders the object at `pose_init` and predicts the flow
/// that carries each rendered pixel to where the same surface point appears
/// in the query. Certainty is the ground-truth visibility of that point.
///
/// `round` selects an independent noise stream per refinement round.
pub fn mock_refiner(
    scene: &Scene,
    mesh: &Mesh,
    pose_init: &Pose,
    nm: &NoiseModel,
    round: u64,
) -> Result<RefinerPrediction> {
    nm.validate()?;
    let size = scene.size();
    let render = rasterize(mesh, pose_init, &scene.k, size, size);
    if render.valid_count() == 0 {
        return Err(Error::ObjectOutOfView);
    }
    let n = render.len();
    let b = if nm.flow_sigma_b > 0.0 {
        nm.flow_sigma_b
    } else {
        NOISELESS_B
    };
    let mut rng = stream_rng(nm.seed, scene.id, REFINER_STREAM | round);
    let mut mu = vec![Vec2::zeros(); n];
    let mut certainty = vec![0.0; n];
    let mut sensitivity = vec![0.0; n];
    for i in 0..n {
        let z = render.values[i];
        if z <= 0.0 {
            continue;
        }
        sensitivity[i] = 1.0;
        let center = render.pixel_center(i);
        let x = backproject_at_depth(pose_init, &scene.k, &center, z);
        let cam = scene.pose.transform(&x);
        let Some(target) = scene.k.project(&cam) else {
            continue;
        };
        let mut flow = target - center;
        if nm.flow_sigma_b > 0.0 {
            flow += Vec2::new(sample_laplace(b, &mut rng), sample_laplace(b, &mut rng));
        }
        mu[i] = flow;
        if scene
            .depth
            .sample(&target)
            .is_some_and(|zq| (zq - cam.z).abs() <= VISIBILITY_TOL)
        {
            certainty[i] = 1.0;
        }
    }
    Ok(RefinerPrediction {
        flow: FlowField::new(size, size, mu, vec![b; n], certainty, sensitivity)?,
        render,
    })
}

/// Agreement of each hypothesis render with the scene depth: the negative
/// mean absolute depth difference over the union of both masks, with
/// missing depth counted as zero.
pub fn selector_scores(hypotheses: &[Pose], scene: &Scene, mesh: &Mesh) -> Result<Vec<f64>> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("hypothesis list"));
    }
    let size = scene.size();
    Ok(hypotheses
        .iter()
        .map(|p| {
            let r = rasterize(mesh, p, &scene.k, size, size);
            let (mut sum, mut count) = (0.0, 0usize);
            for (a, b) in r.values.iter().zip(&scene.depth.values) {
                if *a > 0.0 || *b > 0.0 {
                    sum += (a - b).abs();
                    count += 1;
                }
            }
            if count == 0 {
                f64::NEG_INFINITY
            } else {
                -sum / count as f64
            }
        })
        .collect())
}

/// Index of the best-agreeing hypothesis, lowest index on ties.
pub fn mock_selector(hypotheses: &[Pose], scene: &Scene, mesh: &Mesh) -> Result<usize> {
    let scores = selector_scores(hypotheses, scene, mesh)?;
    crate::correspondence::select_template(&scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::{decode_matches, no_match_class, similarity_score};
    use crate::eval::{mssd, MetricModel};
    use crate::flow::fuse_confidence;
    use crate::geom::{random_rotation, Vec3};
    use crate::losses::{perturb_pose, PoseNoise};
    use crate::mesh::l_bracket;
    use crate::pnp::{refine_pose, RefineProblem};
    use crate::template::{build_templates, TemplateConfig, TemplateSet};
    use rand::seq::SliceRandom;

    fn k() -> Intrinsics {
        Intrinsics::new(280.0, 280.0, 112.0, 112.0).unwrap()
    }

    fn setup(seed: u64) -> (Mesh, TemplateSet, Scene) {
        let mesh = l_bracket();
        let set = build_templates(&mesh, "l_bracket", &TemplateConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = Pose::new(random_rotation(&mut rng), Vec3::new(0.0, 0.0, 0.3));
        let scene = Scene::render(seed, &mesh, pose, k(), 224).unwrap();
        (mesh, set, scene)
    }

    fn best_template(set: &TemplateSet, scene: &Scene) -> usize {
        let scores: Vec<f64> = set
            .templates
            .iter()
            .map(|t| similarity_score(&mock_coarse(scene, t, &NoiseModel::default()).unwrap().classes))
            .collect();
        crate::correspondence::select_template(&scores).unwrap()
    }

    #[test]
    fn noiseless_coarse_reproduces_gt_matches() {
        let (_, set, scene) = setup(71);
        let t = &set.templates[best_template(&set, &scene)];
        let out = mock_coarse(&scene, t, &NoiseModel::default()).unwrap();
        let decoded = decode_matches(&out.classes, &out.offsets, PATCH).unwrap();
        assert!(!decoded.is_empty());
        assert_eq!(decoded.len(), out.gt.matches.len());
        for (a, b) in decoded.matches.iter().zip(&out.gt.matches.matches) {
            assert_eq!(a.query, b.query);
            assert!((a.target - b.target).norm() <= 1e-9);
        }
    }

    #[test]
    fn full_occlusion_scores_zero() {
        let (_, set, scene) = setup(72);
        let nm = NoiseModel {
            occlusion_frac: 1.0,
            ..Default::default()
        };
        for t in set.templates.iter().take(5) {
            let out = mock_coarse(&scene, t, &nm).unwrap();
            assert_eq!(similarity_score(&out.classes), 0.0);
            assert!((0..out.classes.num_cells()).all(|c| out.classes.argmax(c).0 == no_match_class(14)));
        }
    }

    #[test]
    fn partial_occlusion_is_contiguous_and_sized() {
        let (_, set, scene) = setup(73);
        let nm = NoiseModel {
            occlusion_frac: 0.4,
            seed: 3,
            ..Default::default()
        };
        let t = &set.templates[best_template(&set, &scene)];
        let out = mock_coarse(&scene, t, &nm).unwrap();
        let on = out.gt.on_object.iter().filter(|b| **b).count();
        assert_eq!(out.occluded, (0.4 * on as f64).round() as usize);
    }

    #[test]
    fn flip_count_is_binomial() {
        let (_, set, scene) = setup(74);
        let t = &set.templates[best_template(&set, &scene)];
        let p = 0.3;
        let nm = NoiseModel {
            class_flip_prob: p,
            seed: 11,
            ..Default::default()
        };
        let out = mock_coarse(&scene, t, &nm).unwrap();
        let n = out.gt.on_object.iter().filter(|b| **b).count() as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        assert!((out.flipped as f64 - n * p).abs() <= 2.576 * sd + 1.0);
        let wrong = (0..out.classes.num_cells())
            .filter(|&c| out.gt.on_object[c] && out.classes.argmax(c).0 != out.gt.classes[c])
            .count();
        assert_eq!(wrong, out.flipped);
    }

    #[test]
    fn mocks_are_deterministic() {
        let (mesh, set, scene) = setup(75);
        let nm = NoiseModel {
            class_flip_prob: 0.2,
            offset_sigma: 0.1,
            flow_sigma_b: 1.0,
            occlusion_frac: 0.2,
            seed: 5,
        };
        let a = mock_coarse(&scene, &set.templates[3], &nm).unwrap();
        let b = mock_coarse(&scene, &set.templates[3], &nm).unwrap();
        assert_eq!(a.classes, b.classes);
        assert_eq!(a.offsets, b.offsets);
        let init = Pose::new(
            scene.pose.rotation,
            scene.pose.translation + Vec3::new(0.003, 0.0, 0.01),
        );
        let fa = mock_refiner(&scene, &mesh, &init, &nm, 0).unwrap();
        let fb = mock_refiner(&scene, &mesh, &init, &nm, 0).unwrap();
        assert_eq!(fa.flow, fb.flow);
        let fc = mock_refiner(&scene, &mesh, &init, &nm, 1).unwrap();
        assert_ne!(fa.flow.mu, fc.flow.mu);
    }

    #[test]
    fn noiseless_refiner_recovers_gt() {
        let (mesh, _, scene) = setup(76);
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let init = perturb_pose(&scene.pose, &PoseNoise::default().scaled(0.3), &mut rng);
        let pred = mock_refiner(&scene, &mesh, &init, &NoiseModel::default(), 0).unwrap();
        let problem = RefineProblem {
            pose_init: init,
            flow: pred.flow.mu.clone(),
            confidence: fuse_confidence(&pred.flow, 1.0).unwrap(),
            depth_r: pred.render,
            k: scene.k,
        };
        let out = refine_pose(&problem).unwrap();
        assert!(out.pose.rotation_error(&scene.pose) < 1e-6);
        assert!(out.pose.translation_error(&scene.pose) < 1e-6);
    }

    #[test]
    fn laplace_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 40_000;
        let mean_abs = (0..n).map(|_| sample_laplace(2.0, &mut rng).abs()).sum::<f64>() / n as f64;
        assert!((mean_abs - 2.0).abs() < 0.05 * 2.0);
    }

    #[test]
    fn refiner_flow_noise_has_laplace_scale() {
        let (mesh, _, scene) = setup(78);
        let nm = NoiseModel {
            flow_sigma_b: 2.0,
            seed: 1,
            ..Default::default()
        };
        let clean = mock_refiner(&scene, &mesh, &scene.pose, &NoiseModel::default(), 0).unwrap();
        let (mut sum, mut count) = (Vec2::zeros(), 0usize);
        for round in 0..4 {
            let noisy = mock_refiner(&scene, &mesh, &scene.pose, &nm, round).unwrap();
            assert!(noisy.flow.b.iter().all(|b| *b == 2.0));
            for i in 0..clean.flow.len() {
                if clean.flow.sensitivity[i] > 0.0 {
                    sum += (noisy.flow.mu[i] - clean.flow.mu[i]).abs();
                    count += 1;
                }
            }
        }
        assert!(count >= 10_000, "only {count} pixels");
        let mean = sum / count as f64;
        assert!((mean.x - 2.0).abs() < 0.1 && (mean.y - 2.0).abs() < 0.1);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn occluded_pixels_get_zero_certainty() {
        let (mesh, _, mut scene) = setup(79);
        for row in 0..224 {
            for col in 0..112 {
                if scene.depth.get(col, row) > 0.0 {
                    scene.depth.set(col, row, 0.1);
                }
            }
        }
        let pred = mock_refiner(&scene, &mesh, &scene.pose.clone(), &NoiseModel::default(), 0).unwrap();
        let conf = fuse_confidence(&pred.flow, 1.0).unwrap();
        for i in 0..pred.flow.len() {
            if (i % 224) < 111 {
                assert_eq!(pred.flow.certainty[i], 0.0);
                assert_eq!(conf[i], 0.0);
            }
        }
        assert!(pred.flow.certainty.contains(&1.0));
    }

    #[test]
    fn selector_prefers_truth_over_flip() {
        let (mesh, _, scene) = setup(80);
        let flip = Pose::from_axis_angle(Vec3::new(0.0, std::f64::consts::PI, 0.0), Vec3::zeros());
        let hyps = [scene.pose.compose(&flip), scene.pose];
        assert_eq!(mock_selector(&hyps, &scene, &mesh).unwrap(), 1);
        assert_eq!(mock_selector(&hyps[..1], &scene, &mesh).unwrap(), 0);
        assert!(mock_selector(&[], &scene, &mesh).is_err());
    }

    #[test]
    fn selector_agrees_with_mssd() {
        let mesh = l_bracket();
        let model = MetricModel::new(mesh.clone());
        let mut agree = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let pose = Pose::new(random_rotation(&mut rng), Vec3::new(0.0, 0.0, 0.3));
            let scene = Scene::render(trial, &mesh, pose, k(), 224).unwrap();
            // refined hypotheses range from converged to far off
            let mut scales = [0.02, 0.1, 0.25, 0.5, 1.0];
            scales.shuffle(&mut rng);
            let hyps: Vec<Pose> = scales
                .iter()
                .map(|s| perturb_pose(&pose, &PoseNoise::default().scaled(*s), &mut rng))
                .collect();
            let chosen = mock_selector(&hyps, &scene, &mesh).unwrap();
            let errs: Vec<f64> = hyps.iter().map(|h| mssd(h, &pose, &model)).collect();
            let best = crate::correspondence::select_template(&errs.iter().map(|e| -e).collect::<Vec<_>>()).unwrap();
            if chosen == best {
                agree += 1;
            }
        }
        assert!(agree >= 90, "selector agreed with MSSD on {agree} of 100");
    }
}
