//! BOP pose-error functions (VSD, MSSD, MSPD) and Average Recall.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{DepthMap, Intrinsics, Pose, Vec2, Vec3};
use crate::mesh::Mesh;
use crate::template::rasterize;

/// Vertices kept for MSSD and MSPD.
pub const METRIC_POINTS: usize = 1000;
/// VSD occlusion tolerance (meters).
pub const VSD_DELTA: f64 = 0.015;
/// Image width at which the MSPD thresholds are defined.
pub const MSPD_REFERENCE_WIDTH: f64 = 640.0;

/// Fractions of the threshold grids shared by every metric: 0.05, 0.10, ..., 0.50.
pub fn threshold_fractions() -> [f64; 10] {
    std::array::from_fn(|i| 0.05 * (i + 1) as f64)
}

/// VSD misalignment tolerances for an object of diameter `d`.
pub fn vsd_taus(diameter: f64) -> [f64; 10] {
    threshold_fractions().map(|f| f * diameter)
}

/// Mesh data needed by the metrics, with the vertex sample computed once.
#[derive(Clone, Debug)]
pub struct MetricModel {
    pub mesh: Mesh,
    pub points: Vec<Vec3>,
}

impl MetricModel {
    pub fn new(mesh: Mesh) -> Self {
        let points = mesh.sample_vertices(METRIC_POINTS);
        Self { mesh, points }
    }

    pub fn diameter(&self) -> f64 {
        self.mesh.diameter
    }

    pub fn symmetries(&self) -> &[Pose] {
        &self.mesh.symmetries
    }
}

/// Maximum symmetry-aware surface distance (meters).
pub fn mssd(p: &Pose, gt: &Pose, model: &MetricModel) -> f64 {
    model
        .symmetries()
        .iter()
        .map(|s| {
            let g = gt.compose(s);
            model
                .points
                .iter()
                .map(|x| (p.transform(x) - g.transform(x)).norm())
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Maximum symmetry-aware projection distance (pixels).
pub fn mspd(p: &Pose, gt: &Pose, model: &MetricModel, k: &Intrinsics) -> Result<f64> {
    let project = |pose: &Pose, index: usize, x: &Vec3| -> Result<Vec2> {
        let c = pose.transform(x);
        k.project(&c).ok_or(Error::BehindCamera { index, z: c.z })
    };
    let mut best = f64::INFINITY;
    for s in model.symmetries() {
        let g = gt.compose(s);
        let mut worst: f64 = 0.0;
        for (i, x) in model.points.iter().enumerate() {
            worst = worst.max((project(p, i, x)? - project(&g, i, x)?).norm());
        }
        best = best.min(worst);
    }
    Ok(best)
}

/// Rotation (radians) and translation (meters) error of `p` against the
/// closest symmetric equivalent of `gt`.
pub fn symmetric_pose_error(p: &Pose, gt: &Pose, symmetries: &[Pose]) -> (f64, f64) {
    let identity = [Pose::identity()];
    let syms = if symmetries.is_empty() {
        &identity[..]
    } else {
        symmetries
    };
    syms.iter()
        .map(|s| {
            let g = gt.compose(s);
            (p.rotation_error(&g), p.translation_error(&g))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)))
        .expect("at least one symmetry")
}

/// Per-pixel distance from the camera center, `0` where there is no surface.
pub fn distance_image(depth: &DepthMap, k: &Intrinsics) -> Vec<f64> {
    depth
        .values
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            if z > 0.0 {
                k.unproject(&depth.pixel_center(i), z).norm()
            } else {
                0.0
            }
        })
        .collect()
}

fn visibility(scene: &[f64], model: &[f64], delta: f64) -> Vec<bool> {
    scene
        .iter()
        .zip(model)
        .map(|(&s, &m)| m > 0.0 && (s == 0.0 || m - s <= delta))
        .collect()
}

/// VSD for several tolerances at once; the two renders are shared.
pub fn vsd_curve(
    p: &Pose,
    gt: &Pose,
    mesh: &Mesh,
    k: &Intrinsics,
    scene_depth: &DepthMap,
    taus: &[f64],
    delta: f64,
) -> Result<Vec<f64>> {
    let (w, h) = (scene_depth.width, scene_depth.height);
    let scene = distance_image(scene_depth, k);
    let d_est = distance_image(&rasterize(mesh, p, k, w, h), k);
    let d_gt = distance_image(&rasterize(mesh, gt, k, w, h), k);
    let vis_gt = visibility(&scene, &d_gt, delta);
    let mut vis_est = visibility(&scene, &d_est, delta);
    for i in 0..vis_est.len() {
        vis_est[i] |= vis_gt[i] && d_est[i] > 0.0;
    }
    let union = vis_gt.iter().zip(&vis_est).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        return Err(Error::EmptyVisibility);
    }
    let diffs: Vec<f64> = (0..vis_gt.len())
        .filter(|&i| vis_gt[i] && vis_est[i])
        .map(|i| (d_gt[i] - d_est[i]).abs())
        .collect();
    let outside = union - diffs.len();
    Ok(taus
        .iter()
        .map(|tau| (diffs.iter().filter(|d| **d > *tau).count() + outside) as f64 / union as f64)
        .collect())
}

/// Visible surface discrepancy in `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn vsd(
    p: &Pose,
    gt: &Pose,
    mesh: &Mesh,
    k: &Intrinsics,
    scene_depth: &DepthMap,
    tau: f64,
    delta: f64,
) -> Result<f64> {
    Ok(vsd_curve(p, gt, mesh, k, scene_depth, &[tau], delta)?[0])
}

/// Errors of one estimate. Failed estimates carry infinite MSSD/MSPD and VSD of 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// VSD at each tolerance of [`vsd_taus`].
    pub vsd: Vec<f64>,
    #[serde(with = "non_finite")]
    pub mssd: f64,
    #[serde(with = "non_finite")]
    pub mspd: f64,
}

impl PoseError {
    pub fn zero() -> Self {
        Self {
            vsd: vec![0.0; 10],
            mssd: 0.0,
            mspd: 0.0,
        }
    }

    pub fn failure() -> Self {
        Self {
            vsd: vec![1.0; 10],
            mssd: f64::INFINITY,
            mspd: f64::INFINITY,
        }
    }

    pub fn is_failure(&self) -> bool {
        !self.mssd.is_finite()
    }
}

/// Stores non-finite errors as `null` in JSON.
mod non_finite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// All three errors for an estimate, with the ground-truth render as scene.
pub fn evaluate_pose(
    p: &Pose,
    gt: &Pose,
    model: &MetricModel,
    k: &Intrinsics,
    scene_depth: &DepthMap,
) -> Result<PoseError> {
    Ok(PoseError {
        vsd: vsd_curve(
            p,
            gt,
            &model.mesh,
            k,
            scene_depth,
            &vsd_taus(model.diameter()),
            VSD_DELTA,
        )?,
        mssd: mssd(p, gt, model),
        mspd: mspd(p, gt, model, k)?,
    })
}

/// One entry of a recall computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub error: PoseError,
    pub diameter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallSummary {
    pub ar: f64,
    pub ar_vsd: f64,
    pub ar_mssd: f64,
    pub ar_mspd: f64,
    /// Recall at each MSSD threshold (0.05 d to 0.5 d).
    pub mssd_curve: Vec<f64>,
    /// Recall at each MSPD threshold (5 r to 50 r px).
    pub mspd_curve: Vec<f64>,
    /// Recall at each VSD tolerance, averaged over the correctness thresholds.
    pub vsd_curve: Vec<f64>,
}

/// BOP Average Recall. MSPD thresholds scale with `image_width / 640`.
/// An estimate counts as correct when its error is strictly below the threshold.
pub fn average_recall(samples: &[EvalSample], image_width: u32) -> Result<RecallSummary> {
    if samples.is_empty() {
        return Err(Error::Empty("error list"));
    }
    if let Some(s) = samples.iter().find(|s| s.error.vsd.len() != 10) {
        return Err(Error::ShapeMismatch(format!(
            "expected 10 VSD values, got {}",
            s.error.vsd.len()
        )));
    }
    let n = samples.len() as f64;
    let r = image_width as f64 / MSPD_REFERENCE_WIDTH;
    let fractions = threshold_fractions();
    let recall = |ok: &dyn Fn(&EvalSample) -> bool| samples.iter().filter(|s| ok(s)).count() as f64 / n;
    let mssd_curve: Vec<f64> = fractions
        .iter()
        .map(|f| recall(&|s| s.error.mssd < f * s.diameter))
        .collect();
    let mspd_curve: Vec<f64> = fractions
        .iter()
        .map(|f| recall(&|s| s.error.mspd < f * 100.0 * r))
        .collect();
    let vsd_curve: Vec<f64> = (0..10)
        .map(|t| {
            fractions
                .iter()
                .map(|theta| recall(&|s| s.error.vsd[t] < *theta))
                .sum::<f64>()
                / 10.0
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ar_vsd, ar_mssd, ar_mspd) = (mean(&vsd_curve), mean(&mssd_curve), mean(&mspd_curve));
    Ok(RecallSummary {
        ar: (ar_vsd + ar_mssd + ar_mspd) / 3.0,
        ar_vsd,
        ar_mssd,
        ar_mspd,
        mssd_curve,
        mspd_curve,
        vsd_curve,
    })
}
