use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::epnp::epnp;
use super::refine::{solve_reprojection, SolverConfig};
use super::Correspondence;
use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Pose, Vec2, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 256,
            threshold: 2.0,
            sample_size: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacOutcome {
    pub pose: Pose,
    pub inliers: Vec<bool>,
}

impl RansacOutcome {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

fn inlier_mask(pose: &Pose, corr: &[Correspondence], k: &Intrinsics, threshold: f64) -> Vec<bool> {
    corr.iter()
        .map(|c| {
            k.project(&pose.transform(&c.point3d))
                .is_some_and(|p| (p - c.point2d).norm() < threshold)
        })
        .collect()
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|b| **b).count()
}

/// Weighted fit on the selected correspondences: EPnP followed by the
/// weighted reprojection solver.
fn refit(corr: &[Correspondence], mask: &[bool], k: &Intrinsics) -> Option<Pose> {
    let subset: Vec<Correspondence> = corr.iter().zip(mask).filter(|(_, m)| **m).map(|(c, _)| *c).collect();
    let pose = epnp(&subset, k).ok()?;
    let points: Vec<Vec3> = subset.iter().map(|c| c.point3d).collect();
    let pixels: Vec<Vec2> = subset.iter().map(|c| c.point2d).collect();
    let weights: Vec<f64> = subset.iter().map(|c| c.weight).collect();
    if weights.iter().all(|w| *w > 0.0) {
        solve_reprojection(&points, &pixels, &weights, k, &pose, &SolverConfig::default())
            .ok()
            .map(|(p, _)| p)
            .or(Some(pose))
    } else {
        Some(pose)
    }
}

/// Consensus EPnP: hypotheses from random minimal samples are ranked by
/// inlier count, and the winner is re-fit on its inliers.
pub fn ransac_pnp(corr: &[Correspondence], k: &Intrinsics, cfg: &RansacConfig) -> Result<RansacOutcome> {
    if corr.len() < 4 {
        return Err(Error::TooFewCorrespondences {
            needed: 4,
            got: corr.len(),
        });
    }
    if !(cfg.threshold > 0.0) || cfg.iterations == 0 || cfg.sample_size < 4 {
        return Err(Error::InvalidParameter(
            "RANSAC needs a positive threshold, at least one iteration and samples of at least 4".into(),
        ));
    }
    let sample_size = cfg.sample_size.min(corr.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Pose)> = None;
    let mut scratch = Vec::with_capacity(sample_size);
    for _ in 0..cfg.iterations {
        scratch.clear();
        scratch.extend(sample(&mut rng, corr.len(), sample_size).iter().map(|i| corr[i]));
        let Ok(pose) = epnp(&scratch, k) else {
            continue;
        };
        let n = count(&inlier_mask(&pose, corr, k, cfg.threshold));
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, pose));
            if n == corr.len() {
                break;
            }
        }
    }
    let Some((best_count, mut pose)) = best.filter(|(n, _)| *n >= 4) else {
        return Err(Error::NoConsensus {
            inliers: best.map_or(0, |(n, _)| n),
        });
    };

    let mut mask = inlier_mask(&pose, corr, k, cfg.threshold);
    let mut inliers = best_count;
    for _ in 0..3 {
        let Some(candidate) = refit(corr, &mask, k) else {
            break;
        };
        let cand_mask = inlier_mask(&candidate, corr, k, cfg.threshold);
        let n = count(&cand_mask);
        if n < inliers {
            break;
        }
        let unchanged = cand_mask == mask;
        pose = candidate;
        mask = cand_mask;
        inliers = n;
        if unchanged {
            break;
        }
    }
    Ok(RansacOutcome { pose, inliers: mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::random_rotation;
    use rand::Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(280.0, 280.0, 112.0, 112.0).unwrap()
    }

    fn scene(rng: &mut ChaCha8Rng, inliers: usize, outliers: usize) -> (Pose, Vec<Correspondence>) {
        let pose = Pose::new(random_rotation(rng), Vec3::new(0.0, 0.0, 0.3));
        let mut corr: Vec<Correspondence> = (0..inliers)
            .map(|_| {
                let x = Vec3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                );
                Correspondence::new(x, k().project(&pose.transform(&x)).unwrap())
            })
            .collect();
        for _ in 0..outliers {
            let x = Vec3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            );
            corr.push(Correspondence::new(
                x,
                Vec2::new(rng.random_range(0.0..224.0), rng.random_range(0.0..224.0)),
            ));
        }
        (pose, corr)
    }

    #[test]
    fn all_inliers_without_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (gt, corr) = scene(&mut rng, 50, 0);
        let out = ransac_pnp(&corr, &k(), &RansacConfig::default()).unwrap();
        assert!(out.inliers.iter().all(|b| *b));
        assert!(out.pose.rotation_error(&gt) < 1e-8);
    }

    #[test]
    fn excludes_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..5 {
            let (gt, corr) = scene(&mut rng, 40, 20);
            let out = ransac_pnp(&corr, &k(), &RansacConfig::default()).unwrap();
            assert!(out.pose.rotation_error(&gt).to_degrees() < 0.2);
            assert!(out.inliers[..40].iter().all(|b| *b));
            // a random outlier can land within 2 px of its true projection by chance
            assert!(out.inliers[40..].iter().filter(|b| **b).count() <= 1);
        }
    }

    #[test]
    fn all_outliers_have_no_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (_, corr) = scene(&mut rng, 0, 40);
        assert!(matches!(
            ransac_pnp(&corr, &k(), &RansacConfig::default()),
            Err(Error::NoConsensus { .. })
        ));
    }

    #[test]
    fn deterministic_for_a_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let (_, corr) = scene(&mut rng, 30, 30);
        let cfg = RansacConfig {
            seed: 9,
            ..Default::default()
        };
        let a = ransac_pnp(&corr, &k(), &cfg).unwrap();
        let b = ransac_pnp(&corr, &k(), &cfg).unwrap();
        assert_eq!(a, b);
    }
}
