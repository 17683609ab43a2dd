//! Probabilistic flow: a per-pixel Laplace mean and scale with certainty and
//! sensitivity maps, their fusion into a confidence map, and the RGB-D pose
//! path that lifts flow to 3D-3D pairs.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{backproject_at_depth, kabsch, DepthMap, Intrinsics, Pose, Vec2, Vec3};

/// Default flow radius (pixels) for [`flow_probability`].
pub const DEFAULT_RADIUS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: u32,
    pub height: u32,
    pub mu: Vec<Vec2>,
    pub b: Vec<f64>,
    pub certainty: Vec<f64>,
    pub sensitivity: Vec<f64>,
}

fn in_unit(v: &[f64]) -> bool {
    v.iter().all(|x| *x >= 0.0 && *x <= 1.0)
}

impl FlowField {
    pub fn new(
        width: u32,
        height: u32,
        mu: Vec<Vec2>,
        b: Vec<f64>,
        certainty: Vec<f64>,
        sensitivity: Vec<f64>,
    ) -> Result<Self> {
        let n = width as usize * height as usize;
        if [mu.len(), b.len(), certainty.len(), sensitivity.len()]
            .iter()
            .any(|l| *l != n)
        {
            return Err(Error::ShapeMismatch(format!(
                "flow planes must have {n} entries for {width}x{height}"
            )));
        }
        if b.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("Laplace scale b must be positive".into()));
        }
        if !in_unit(&certainty) || !in_unit(&sensitivity) {
            return Err(Error::InvalidParameter(
                "certainty and sensitivity must lie in [0, 1]".into(),
            ));
        }
        if mu.iter().any(|m| !m.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("flow mean"));
        }
        Ok(Self {
            width,
            height,
            mu,
            b,
            certainty,
            sensitivity,
        })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Probability that the true flow lies within L1 radius `radius` of the mean
/// under a Laplace distribution of scale `b`: `1 - exp(-R / b)`.
pub fn flow_probability(b: f64, radius: f64) -> Result<f64> {
    if !(b > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "Laplace scale must be positive, got {b}"
        )));
    }
    if !(radius >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "flow radius must be nonnegative, got {radius}"
        )));
    }
    Ok(-(-radius / b).exp_m1())
}

/// Per-pixel confidence `certainty * sensitivity * P_R`.
pub fn fuse_confidence(f: &FlowField, radius: f64) -> Result<Vec<f64>> {
    (0..f.len())
        .map(|i| Ok(f.certainty[i] * f.sensitivity[i] * flow_probability(f.b[i], radius)?))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RgbdConfig {
    /// Pixels below this certainty are discarded.
    pub min_certainty: f64,
    /// Inlier distance in meters.
    pub threshold: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RgbdConfig {
    fn default() -> Self {
        Self {
            min_certainty: 0.5,
            threshold: 0.005,
            iterations: 256,
            seed: 0,
        }
    }
}

fn lexicographic(a: &(Vec3, Vec3), b: &(Vec3, Vec3)) -> std::cmp::Ordering {
    a.0.iter()
        .chain(a.1.iter())
        .zip(b.0.iter().chain(b.1.iter()))
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Rigid pose from flow and depth.
///
/// Each certain rendered pixel gives a model point (backprojected through the
/// rendered depth at `pose_init`) and a camera point (its flow target lifted
/// with the interpolated query depth). The pose is fit robustly: three-point
/// Kabsch hypotheses scored by truncated squared distance, then re-fit on the
/// inliers of the best one.
pub fn rgbd_pose(
    f: &FlowField,
    depth_q: &DepthMap,
    depth_r: &DepthMap,
    k: &Intrinsics,
    pose_init: &Pose,
    cfg: &RgbdConfig,
) -> Result<Pose> {
    if depth_r.len() != f.len() || depth_r.width != f.width {
        return Err(Error::ShapeMismatch("flow and rendered depth differ in size".into()));
    }
    let mut pairs: Vec<(Vec3, Vec3)> = Vec::new();
    for i in 0..f.len() {
        let zr = depth_r.values[i];
        if f.certainty[i] < cfg.min_certainty || zr <= 0.0 {
            continue;
        }
        let center = depth_r.pixel_center(i);
        let target = center + f.mu[i];
        let Some(zq) = depth_q.sample(&target) else {
            continue;
        };
        pairs.push((
            backproject_at_depth(pose_init, k, &center, zr),
            k.unproject(&target, zq),
        ));
    }
    if pairs.len() < 3 {
        return Err(Error::InsufficientSupport(format!(
            "{} certain pixels with valid query depth, need 3",
            pairs.len()
        )));
    }
    robust_rigid_fit(pairs, cfg)
}

/// Robust rigid fit of `(model, camera)` point pairs; the result does not
/// depend on the order of `pairs`.
pub fn robust_rigid_fit(mut pairs: Vec<(Vec3, Vec3)>, cfg: &RgbdConfig) -> Result<Pose> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientSupport(format!(
            "{} point pairs, need 3",
            pairs.len()
        )));
    }
    pairs.sort_by(lexicographic);
    let src: Vec<Vec3> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Vec3> = pairs.iter().map(|p| p.1).collect();

    let thr2 = cfg.threshold * cfg.threshold;
    let score = |pose: &Pose| -> f64 {
        src.iter()
            .zip(&dst)
            .map(|(s, d)| (pose.transform(s) - d).norm_squared().min(thr2))
            .sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, Pose)> = None;
    for _ in 0..cfg.iterations.max(1) {
        let idx = sample(&mut rng, src.len(), 3);
        let s: Vec<Vec3> = idx.iter().map(|i| src[i]).collect();
        let d: Vec<Vec3> = idx.iter().map(|i| dst[i]).collect();
        let Ok(pose) = kabsch(&s, &d, None) else {
            continue;
        };
        let c = score(&pose);
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, pose));
        }
    }
    let Some((_, mut pose)) = best else {
        return Err(Error::Degenerate("every 3-point sample was degenerate".into()));
    };
    let mut mask: Vec<bool> = Vec::new();
    for _ in 0..5 {
        let next: Vec<bool> = src
            .iter()
            .zip(&dst)
            .map(|(s, d)| (pose.transform(s) - d).norm_squared() < thr2)
            .collect();
        if next == mask {
            break;
        }
        mask = next;
        let weights: Vec<f64> = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
        if mask.iter().filter(|m| **m).count() < 3 {
            break;
        }
        match kabsch(&src, &dst, Some(&weights)) {
            Ok(p) => pose = p,
            Err(_) => break,
        }
    }
    Ok(pose)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowHeader {
    width: u32,
    height: u32,
    planes: Vec<String>,
}

const PLANES: [&str; 5] = ["mu_x", "mu_y", "b", "certainty", "sensitivity"];

/// Binary flow file: `u32 LE` header length, JSON header, then five
/// row-major `f32 LE` planes in the header's order.
pub fn write_flow_file(f: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&FlowHeader {
        width: f.width,
        height: f.height,
        planes: PLANES.iter().map(|s| s.to_string()).collect(),
    })?;
    let mut out = Vec::with_capacity(4 + header.len() + 20 * f.len());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let planes: [Box<dyn Fn(usize) -> f64>; 5] = [
        Box::new(|i| f.mu[i].x),
        Box::new(|i| f.mu[i].y),
        Box::new(|i| f.b[i]),
        Box::new(|i| f.certainty[i]),
        Box::new(|i| f.sensitivity[i]),
    ];
    for plane in &planes {
        for i in 0..f.len() {
            out.extend_from_slice(&(plane(i) as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_flow_file(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::parse(path, m.to_string());
    if bytes.len() < 4 {
        return Err(bad("missing header length"));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let header_bytes = bytes.get(4..4 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: FlowHeader = serde_json::from_slice(header_bytes).map_err(|e| Error::parse(path, e.to_string()))?;
    if header.planes != PLANES {
        return Err(bad("unexpected plane order"));
    }
    let n = header.width as usize * header.height as usize;
    let body = &bytes[4 + hlen..];
    if body.len() != 20 * n {
        return Err(bad("plane data does not match the header size"));
    }
    let plane = |p: usize| -> Vec<f64> {
        body[4 * n * p..4 * n * (p + 1)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    let (mx, my) = (plane(0), plane(1));
    let mu = mx.iter().zip(&my).map(|(x, y)| Vec2::new(*x, *y)).collect();
    FlowField::new(header.width, header.height, mu, plane(2), plane(3), plane(4))
        .map_err(|e| Error::parse(path, e.to_string()))
}
