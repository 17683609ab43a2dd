//! Perspective-n-point solvers: EPnP, RANSAC over EPnP, and the weighted
//! reprojection refinement with its implicit gradients.

mod epnp;
pub mod gradcheck;
mod ransac;
mod refine;

pub use epnp::epnp;
pub use ransac::{ransac_pnp, RansacConfig, RansacOutcome};
pub use refine::{
    refine_pose, refine_pose_grad, refine_pose_grad_with, refine_pose_with, solve_reprojection, PnPJacobians,
    RefineOutcome, RefineProblem, RefineTrace, SolverConfig,
};

use crate::geom::{Vec2, Vec3};

/// One 2D-3D correspondence: a model-frame point and its observed pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub point3d: Vec3,
    pub point2d: Vec2,
    pub weight: f64,
}

impl Correspondence {
    pub fn new(point3d: Vec3, point2d: Vec2) -> Self {
        Self {
            point3d,
            point2d,
            weight: 1.0,
        }
    }
}
