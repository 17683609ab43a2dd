//! Finite-difference check of the implicit PnP gradients.

use nalgebra::Vector6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::refine::{refine_pose_grad_with, refine_pose_with, PnPJacobians, RefineProblem, SolverConfig};
use crate::error::Result;
use crate::geom::{backproject_at_depth, random_rotation, Intrinsics, Pose, Vec2, Vec3};
use crate::mesh::l_bracket;
use crate::template::rasterize;

/// Central-difference step for both flow and confidence.
pub const FD_STEP: f64 = 1e-4;

/// A small refinement problem: the L-bracket rendered at a jittered pose
/// (24 x 24 pixels), flow towards a random ground truth plus uniform noise of
/// half a pixel, and random confidences in `[0.2, 1)`.
pub fn random_problem(seed: u64) -> RefineProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Intrinsics::new(60.0, 60.0, 12.0, 12.0).expect("valid intrinsics");
    let gt = Pose::new(random_rotation(&mut rng), Vec3::new(0.0, 0.0, 0.35));
    let jitter = Vector6::from_fn(|i, _| {
        let s = if i < 3 { 0.05 } else { 0.005 };
        rng.random_range(-s..s)
    });
    let init = gt.perturb(&jitter);
    let depth_r = rasterize(&l_bracket(), &init, &k, 24, 24);
    let mut flow = vec![Vec2::zeros(); depth_r.len()];
    let mut confidence = vec![0.0; depth_r.len()];
    for i in 0..depth_r.len() {
        if depth_r.values[i] > 0.0 {
            let c = depth_r.pixel_center(i);
            let x = backproject_at_depth(&init, &k, &c, depth_r.values[i]);
            let target = k.project(&gt.transform(&x)).expect("in front of the camera");
            flow[i] = target - c + Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            confidence[i] = rng.random_range(0.2..1.0);
        }
    }
    RefineProblem {
        pose_init: init,
        flow,
        confidence,
        depth_r,
        k,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    /// Largest relative error over the checked flow columns.
    pub max_rel_flow: f64,
    /// Largest relative error over the checked confidence columns.
    pub max_rel_weight: f64,
    /// Pixel with the largest error of either kind.
    pub worst_pixel: usize,
    pub pixels_checked: usize,
    pub lm_monotone: bool,
}

impl GradCheck {
    pub fn max_rel(&self) -> f64 {
        self.max_rel_flow.max(self.max_rel_weight)
    }
}

fn relative(fd: &Vector6<f64>, an: &Vector6<f64>) -> f64 {
    (fd - an).norm() / fd.norm().max(an.norm()).max(1e-8)
}

/// Compares the implicit Jacobians with central differences on up to
/// `pixels` evenly spread support pixels. `tamper` may alter the analytic
/// Jacobians before the comparison.
pub fn gradcheck_with(p: &RefineProblem, pixels: usize, tamper: impl FnOnce(&mut PnPJacobians)) -> Result<GradCheck> {
    let cfg = SolverConfig::tight();
    let (out, mut jac) = refine_pose_grad_with(p, &cfg)?;
    tamper(&mut jac);
    let support: Vec<usize> = (0..p.flow.len())
        .filter(|&i| p.confidence[i] > 0.0 && p.depth_r.values[i] > 0.0)
        .collect();
    let stride = (support.len() / pixels.max(1)).max(1);
    let chosen: Vec<usize> = support.iter().copied().step_by(stride).take(pixels).collect();

    let solve = |q: &RefineProblem| refine_pose_with(q, &cfg).map(|o| o.pose);
    let diff = |perturb: &dyn Fn(&mut RefineProblem, f64)| -> Result<Vector6<f64>> {
        let mut plus = p.clone();
        perturb(&mut plus, FD_STEP);
        let mut minus = p.clone();
        perturb(&mut minus, -FD_STEP);
        Ok((out.pose.tangent_to(&solve(&plus)?) - out.pose.tangent_to(&solve(&minus)?)) / (2.0 * FD_STEP))
    };

    let mut check = GradCheck {
        max_rel_flow: 0.0,
        max_rel_weight: 0.0,
        worst_pixel: chosen.first().copied().unwrap_or(0),
        pixels_checked: chosen.len(),
        lm_monotone: out.trace.lm_monotone(),
    };
    let mut worst = 0.0;
    for &pix in &chosen {
        for axis in 0..2 {
            let fd = diff(&|q, h| q.flow[pix][axis] += h)?;
            let e = relative(&fd, &jac.d_pose_d_flow.column(2 * pix + axis).into_owned());
            check.max_rel_flow = check.max_rel_flow.max(e);
            if e > worst {
                worst = e;
                check.worst_pixel = pix;
            }
        }
        let fd = diff(&|q, h| q.confidence[pix] += h)?;
        let e = relative(&fd, &jac.d_pose_d_weight.column(pix).into_owned());
        check.max_rel_weight = check.max_rel_weight.max(e);
        if e > worst {
            worst = e;
            check.worst_pixel = pix;
        }
    }
    Ok(check)
}

pub fn gradcheck(p: &RefineProblem, pixels: usize) -> Result<GradCheck> {
    gradcheck_with(p, pixels, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_problems_pass() {
        for seed in 0..3 {
            let c = gradcheck(&random_problem(seed), 6).unwrap();
            assert_eq!(c.pixels_checked, 6);
            assert!(c.max_rel() < 1e-3, "seed {seed}: {c:?}");
            assert!(c.lm_monotone);
        }
    }

    #[test]
    fn corrupted_jacobian_is_detected() {
        let p = random_problem(4);
        let c = gradcheck_with(&p, 4, |j| j.d_pose_d_flow *= 1.01).unwrap();
        assert!(c.max_rel_flow > 1e-3);
        assert!(c.max_rel_weight < 1e-3);
    }

    #[test]
    fn problems_are_deterministic() {
        assert_eq!(random_problem(9), random_problem(9));
        assert_ne!(random_problem(9).pose_init, random_problem(10).pose_init);
    }
}
