use nalgebra::{Cholesky, Matrix2x6, Matrix3, Matrix6, Matrix6xX, RowVector3, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{backproject_at_depth, skew, DepthMap, Intrinsics, Pose, Vec2, Vec3, MIN_DEPTH};

/// Damping and stopping rules for the weighted reprojection solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Levenberg-Marquardt iterations run before switching to Gauss-Newton.
    pub lm_iterations: usize,
    pub lambda0: f64,
    /// Damping is multiplied by this on a rejected step and divided on an accepted one.
    pub lambda_factor: f64,
    /// Rejected attempts allowed within one LM iteration.
    pub max_retries: usize,
    pub gn_iterations: usize,
    pub gn_step_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lm_iterations: 3,
            lambda0: 1e-3,
            lambda_factor: 10.0,
            max_retries: 10,
            gn_iterations: 10,
            gn_step_tol: 1e-10,
        }
    }
}

impl SolverConfig {
    /// Runs Gauss-Newton essentially to machine precision; used when the
    /// solution itself is differentiated numerically.
    pub fn tight() -> Self {
        Self {
            gn_iterations: 50,
            gn_step_tol: 1e-15,
            ..Self::default()
        }
    }
}

/// Objective values along a solve: the starting value, then one entry per
/// accepted LM step and per accepted Gauss-Newton step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineTrace {
    pub initial: f64,
    pub lm: Vec<f64>,
    pub gn: Vec<f64>,
    pub lm_rejections: usize,
}

impl RefineTrace {
    pub fn objectives(&self) -> Vec<f64> {
        std::iter::once(self.initial)
            .chain(self.lm.iter().copied())
            .chain(self.gn.iter().copied())
            .collect()
    }

    pub fn final_objective(&self) -> f64 {
        *self.gn.last().or(self.lm.last()).unwrap_or(&self.initial)
    }

    /// True when no accepted LM step increased the objective.
    pub fn lm_monotone(&self) -> bool {
        let mut prev = self.initial;
        for &v in &self.lm {
            if v > prev {
                return false;
            }
            prev = v;
        }
        true
    }
}

struct Residuals<'a> {
    points: &'a [Vec3],
    targets: &'a [Vec2],
    weights: &'a [f64],
    k: &'a Intrinsics,
}

/// Jacobian of the pinhole projection with respect to the camera-frame point.
#[inline]
fn projection_jacobian(k: &Intrinsics, p: &Vec3) -> (RowVector3<f64>, RowVector3<f64>) {
    let iz = 1.0 / p.z;
    (
        RowVector3::new(k.fx * iz, 0.0, -k.fx * p.x * iz * iz),
        RowVector3::new(0.0, k.fy * iz, -k.fy * p.y * iz * iz),
    )
}

/// d(projection)/d(left tangent) for the rotated point `q` and camera point `p`.
#[inline]
fn tangent_jacobian(k: &Intrinsics, q: &Vec3, p: &Vec3) -> Matrix2x6<f64> {
    let (jx, jy) = projection_jacobian(k, p);
    let neg_skew = -skew(q);
    let rx = jx * neg_skew;
    let ry = jy * neg_skew;
    Matrix2x6::new(
        rx[0], rx[1], rx[2], jx[0], jx[1], jx[2], //
        ry[0], ry[1], ry[2], jy[0], jy[1], jy[2],
    )
}

impl Residuals<'_> {
    fn first_behind(&self, pose: &Pose) -> Option<(usize, f64)> {
        self.points.iter().enumerate().find_map(|(i, x)| {
            let z = pose.transform(x).z;
            (self.weights[i] != 0.0 && z <= MIN_DEPTH).then_some((i, z))
        })
    }

    fn cost(&self, pose: &Pose) -> Option<f64> {
        let mut cost = 0.0;
        for i in 0..self.points.len() {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let p = pose.transform(&self.points[i]);
            let e = self.k.project(&p)? - self.targets[i];
            cost += 0.5 * w * w * e.norm_squared();
        }
        Some(cost)
    }

    /// Gauss-Newton normal matrix, gradient and cost.
    fn normal_equations(&self, pose: &Pose) -> Option<(Matrix6<f64>, Vector6<f64>, f64)> {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        let mut cost = 0.0;
        for i in 0..self.points.len() {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let q = pose.rotation * self.points[i];
            let p = q + pose.translation;
            let e = self.k.project(&p)? - self.targets[i];
            let a = tangent_jacobian(self.k, &q, &p);
            let w2 = w * w;
            h += w2 * a.transpose() * a;
            g += w2 * a.transpose() * e;
            cost += 0.5 * w2 * e.norm_squared();
        }
        Some((h, g, cost))
    }
}

fn solve_spd(m: Matrix6<f64>, rhs: &Vector6<f64>) -> Option<Vector6<f64>> {
    let x = Cholesky::new(m)?.solve(rhs);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Minimizes `1/2 sum_i |w_i (pi(R x_i + t) - y_i)|^2` over the pose.
///
/// A fixed number of Levenberg-Marquardt iterations with Marquardt diagonal
/// damping is followed by Gauss-Newton. Steps that would place a weighted
/// point behind the camera are rejected like any cost increase.
pub fn solve_reprojection(
    points: &[Vec3],
    targets: &[Vec2],
    weights: &[f64],
    k: &Intrinsics,
    init: &Pose,
    cfg: &SolverConfig,
) -> Result<(Pose, RefineTrace)> {
    if points.len() != targets.len() || points.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} points, {} targets, {} weights",
            points.len(),
            targets.len(),
            weights.len()
        )));
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("3D points"));
    }
    if targets.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("2D targets"));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("weights"));
    }
    let res = Residuals {
        points,
        targets,
        weights,
        k,
    };
    if let Some((index, z)) = res.first_behind(init) {
        return Err(Error::BehindCamera { index, z });
    }

    let mut pose = *init;
    let (mut h, mut g, mut cost) = res.normal_equations(&pose).expect("checked in front of camera");
    let mut trace = RefineTrace {
        initial: cost,
        ..Default::default()
    };
    let mut lambda = cfg.lambda0;

    for _ in 0..cfg.lm_iterations {
        let mut accepted = false;
        let mut converged = false;
        for _ in 0..cfg.max_retries {
            let mut damped = h;
            let floor = 1e-12 * h.diagonal().max();
            for d in 0..6 {
                damped[(d, d)] += lambda * h[(d, d)].max(floor);
            }
            let step = solve_spd(damped, &(-g));
            let candidate = step.map(|s| (s, pose.perturb(&s)));
            let new_cost = candidate.as_ref().and_then(|(_, c)| res.cost(c));
            match (candidate, new_cost) {
                (Some((step, cand)), Some(c)) if c <= cost => {
                    pose = cand;
                    lambda /= cfg.lambda_factor;
                    trace.lm.push(c);
                    accepted = true;
                    converged = step.norm() < cfg.gn_step_tol;
                    break;
                }
                _ => {
                    lambda *= cfg.lambda_factor;
                    trace.lm_rejections += 1;
                }
            }
        }
        if !accepted {
            break;
        }
        (h, g, cost) = res
            .normal_equations(&pose)
            .expect("accepted poses keep points in front");
        if converged {
            break;
        }
    }

    for _ in 0..cfg.gn_iterations {
        let Some(step) = solve_spd(h, &(-g)) else {
            break;
        };
        let cand = pose.perturb(&step);
        match res.cost(&cand) {
            Some(c) if c <= cost * (1.0 + 1e-12) + f64::MIN_POSITIVE => {
                pose = cand;
                trace.gn.push(c);
                if step.norm() < cfg.gn_step_tol {
                    break;
                }
                (h, g, cost) = res
                    .normal_equations(&pose)
                    .expect("accepted poses keep points in front");
            }
            _ => break,
        }
    }
    Ok((pose.orthonormalized(), trace))
}

/// Inputs of the flow-driven pose update.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineProblem {
    pub pose_init: Pose,
    /// Per-pixel flow from the rendered view to the query, row-major.
    pub flow: Vec<Vec2>,
    /// Per-pixel confidence in `[0, 1]`.
    pub confidence: Vec<f64>,
    /// Depth rendered at `pose_init`.
    pub depth_r: DepthMap,
    pub k: Intrinsics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    pub pose: Pose,
    pub trace: RefineTrace,
    /// Pixels that entered the objective.
    pub support: usize,
}

/// Derivatives of the refined pose (left tangent coordinates at the solution).
///
/// Columns follow the image's row-major pixel order: flow columns `2i` and
/// `2i + 1` are the x and y flow of pixel `i`, weight column `i` its confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct PnPJacobians {
    pub d_pose_d_flow: Matrix6xX<f64>,
    pub d_pose_d_weight: Matrix6xX<f64>,
}

struct Support {
    pixels: Vec<usize>,
    points: Vec<Vec3>,
    targets: Vec<Vec2>,
    weights: Vec<f64>,
}

impl RefineProblem {
    fn validate(&self) -> Result<()> {
        let n = self.depth_r.len();
        if self.flow.len() != n || self.confidence.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "depth has {n} pixels, flow {}, confidence {}",
                self.flow.len(),
                self.confidence.len()
            )));
        }
        if self.confidence.iter().any(|c| !(*c >= 0.0 && *c <= 1.0)) {
            return Err(Error::InvalidParameter("confidence must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Backprojects every rendered pixel with positive confidence.
    fn support(&self) -> Result<Support> {
        self.validate()?;
        let mut s = Support {
            pixels: Vec::new(),
            points: Vec::new(),
            targets: Vec::new(),
            weights: Vec::new(),
        };
        for i in 0..self.depth_r.len() {
            let (w, z) = (self.confidence[i], self.depth_r.values[i]);
            if w > 0.0 && z > 0.0 {
                let center = self.depth_r.pixel_center(i);
                s.pixels.push(i);
                s.points
                    .push(backproject_at_depth(&self.pose_init, &self.k, &center, z));
                s.targets.push(center + self.flow[i]);
                s.weights.push(w);
            }
        }
        if s.pixels.len() < 3 {
            return Err(Error::InsufficientSupport(format!(
                "{} pixels with positive confidence and depth, need 3",
                s.pixels.len()
            )));
        }
        Ok(s)
    }
}

pub fn refine_pose(p: &RefineProblem) -> Result<RefineOutcome> {
    refine_pose_with(p, &SolverConfig::default())
}

pub fn refine_pose_with(p: &RefineProblem, cfg: &SolverConfig) -> Result<RefineOutcome> {
    let s = p.support()?;
    let (pose, trace) = solve_reprojection(&s.points, &s.targets, &s.weights, &p.k, &p.pose_init, cfg)?;
    if !trace.final_objective().is_finite() {
        return Err(Error::NonFinite("refinement objective"));
    }
    Ok(RefineOutcome {
        pose,
        trace,
        support: s.pixels.len(),
    })
}

pub fn refine_pose_grad(p: &RefineProblem) -> Result<(RefineOutcome, PnPJacobians)> {
    refine_pose_grad_with(p, &SolverConfig::default())
}

/// Refines the pose and differentiates the solution implicitly through the
/// stationarity condition `sum_i w_i^2 A_i^T e_i = 0`.
pub fn refine_pose_grad_with(p: &RefineProblem, cfg: &SolverConfig) -> Result<(RefineOutcome, PnPJacobians)> {
    let s = p.support()?;
    let (pose, trace) = solve_reprojection(&s.points, &s.targets, &s.weights, &p.k, &p.pose_init, cfg)?;
    let k = &p.k;

    let mut h = Matrix6::<f64>::zeros();
    let mut per_pixel = Vec::with_capacity(s.pixels.len());
    for i in 0..s.pixels.len() {
        let w = s.weights[i];
        let q = pose.rotation * s.points[i];
        let pc = q + pose.translation;
        let e = k.project(&pc).ok_or(Error::BehindCamera { index: i, z: pc.z })? - s.targets[i];
        let a = tangent_jacobian(k, &q, &pc);
        let (jx, jy) = projection_jacobian(k, &pc);

        // second derivatives of the projection with respect to the camera point
        let iz2 = 1.0 / (pc.z * pc.z);
        let iz3 = iz2 / pc.z;
        let mut hx = Matrix3::zeros();
        hx[(0, 2)] = -k.fx * iz2;
        hx[(2, 0)] = -k.fx * iz2;
        hx[(2, 2)] = 2.0 * k.fx * pc.x * iz3;
        let mut hy = Matrix3::zeros();
        hy[(1, 2)] = -k.fy * iz2;
        hy[(2, 1)] = -k.fy * iz2;
        hy[(2, 2)] = 2.0 * k.fy * pc.y * iz3;

        let mut dp = nalgebra::Matrix3x6::zeros();
        dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&q)));
        dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());

        let mut second = Matrix6::zeros();
        for (ec, hc, jc) in [(e.x, &hx, jx), (e.y, &hy, jy)] {
            let c = jc.transpose();
            let mut term = dp.transpose() * hc * dp;
            let rot = 0.5 * (q * c.transpose() + c * q.transpose()) - c.dot(&q) * Matrix3::identity();
            let mut block = term.fixed_view_mut::<3, 3>(0, 0);
            block += rot;
            term *= ec;
            second += term;
        }
        h += w * w * (a.transpose() * a + second);
        per_pixel.push((a, e));
    }

    let eig = SymmetricEigen::new(h);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition < 1e12) {
        return Err(Error::SingularSystem { condition });
    }
    let h_inv =
        eig.eigenvectors * Matrix6::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v)) * eig.eigenvectors.transpose();

    let n = p.depth_r.len();
    let mut d_flow = Matrix6xX::zeros(2 * n);
    let mut d_weight = Matrix6xX::zeros(n);
    for (i, (a, e)) in per_pixel.iter().enumerate() {
        let pix = s.pixels[i];
        let w = s.weights[i];
        let at = a.transpose();
        let df = h_inv * (w * w) * at;
        d_flow.column_mut(2 * pix).copy_from(&df.column(0));
        d_flow.column_mut(2 * pix + 1).copy_from(&df.column(1));
        d_weight.column_mut(pix).copy_from(&(-2.0 * w * (h_inv * (at * e))));
    }
    Ok((
        RefineOutcome {
            pose,
            trace,
            support: s.pixels.len(),
        },
        PnPJacobians {
            d_pose_d_flow: d_flow,
            d_pose_d_weight: d_weight,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{random_rotation, so3_exp};
    use crate::mesh::l_bracket;
    use crate::template::rasterize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(60.0, 60.0, 16.0, 16.0).unwrap()
    }

    fn gt_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(random_rotation(rng), Vec3::new(0.0, 0.0, 0.35))
    }

    fn jitter(pose: &Pose, rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
        let d = Vector6::from_fn(|i, _| {
            let s = if i < 3 { rot } else { trans };
            rng.random_range(-s..s)
        });
        pose.perturb(&d)
    }

    /// Flow carrying each rendered pixel of `init` to where `gt` projects it.
    fn exact_problem(init: &Pose, gt: &Pose, size: u32) -> RefineProblem {
        let k = k();
        let depth_r = rasterize(&l_bracket(), init, &k, size, size);
        let mut flow = vec![Vec2::zeros(); depth_r.len()];
        let mut confidence = vec![0.0; depth_r.len()];
        for i in 0..depth_r.len() {
            if depth_r.values[i] > 0.0 {
                let c = depth_r.pixel_center(i);
                let x = backproject_at_depth(init, &k, &c, depth_r.values[i]);
                flow[i] = k.project(&gt.transform(&x)).unwrap() - c;
                confidence[i] = 1.0;
            }
        }
        RefineProblem {
            pose_init: *init,
            flow,
            confidence,
            depth_r,
            k,
        }
    }

    #[test]
    fn exact_flow_recovers_target_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let gt = gt_pose(&mut rng);
            let init = jitter(&gt, &mut rng, 0.1, 0.01);
            let out = refine_pose(&exact_problem(&init, &gt, 32)).unwrap();
            assert!(out.pose.rotation_error(&gt) < 1e-6);
            assert!(out.pose.translation_error(&gt) < 1e-7);
            assert!(out.trace.lm_monotone());
        }
    }

    #[test]
    fn zero_flow_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = gt_pose(&mut rng);
        let out = refine_pose(&exact_problem(&gt, &gt, 32)).unwrap();
        assert!(out.pose.rotation_error(&gt) < 1e-9);
        assert!(out.pose.translation_error(&gt) < 1e-9);
    }

    #[test]
    fn zero_confidence_is_insufficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = gt_pose(&mut rng);
        let mut p = exact_problem(&gt, &gt, 32);
        p.confidence.iter_mut().for_each(|c| *c = 0.0);
        assert!(matches!(refine_pose(&p), Err(Error::InsufficientSupport(_))));
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = gt_pose(&mut rng);
        let mut p = exact_problem(&gt, &gt, 32);
        p.flow.pop();
        assert!(matches!(refine_pose(&p), Err(Error::ShapeMismatch(_))));
        let mut p = exact_problem(&gt, &gt, 32);
        let i = p.confidence.iter().position(|c| *c > 0.0).unwrap();
        p.flow[i] = Vec2::new(f64::NAN, 0.0);
        assert!(matches!(refine_pose(&p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn equivariant_under_model_frame_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = gt_pose(&mut rng);
        let init = jitter(&gt, &mut rng, 0.1, 0.01);
        let mut p = exact_problem(&init, &gt, 32);
        for (i, f) in p.flow.iter_mut().enumerate() {
            *f += Vec2::new(((i * 7) % 5) as f64 * 0.1 - 0.2, ((i * 3) % 7) as f64 * 0.05 - 0.15);
        }
        let a = refine_pose(&p).unwrap().pose;
        let t = Pose::new(so3_exp(&Vec3::new(0.4, -0.2, 1.1)), Vec3::new(0.02, -0.01, 0.03));
        let mut q = p.clone();
        q.pose_init = p.pose_init.compose(&t);
        let b = refine_pose(&q).unwrap().pose;
        let expected = a.compose(&t);
        assert!((b.rotation - expected.rotation).amax() < 1e-8);
        assert!((b.translation - expected.translation).amax() < 1e-8);
    }

    fn noisy_problem(seed: u64) -> RefineProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = gt_pose(&mut rng);
        let init = jitter(&gt, &mut rng, 0.05, 0.005);
        let mut p = exact_problem(&init, &gt, 24);
        for i in 0..p.flow.len() {
            if p.confidence[i] > 0.0 {
                p.flow[i] += Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                p.confidence[i] = rng.random_range(0.2..1.0);
            }
        }
        p
    }

    fn finite_difference(
        p: &RefineProblem,
        center: &Pose,
        perturb: impl Fn(&mut RefineProblem, f64),
        h: f64,
    ) -> Vector6<f64> {
        let cfg = SolverConfig::tight();
        let mut plus = p.clone();
        perturb(&mut plus, h);
        plus.pose_init = p.pose_init;
        let mut minus = p.clone();
        perturb(&mut minus, -h);
        let a = refine_pose_with(&plus, &cfg).unwrap().pose;
        let b = refine_pose_with(&minus, &cfg).unwrap().pose;
        (center.tangent_to(&a) - center.tangent_to(&b)) / (2.0 * h)
    }

    #[test]
    fn implicit_gradients_match_finite_differences() {
        let p = noisy_problem(11);
        let (out, jac) = refine_pose_grad_with(&p, &SolverConfig::tight()).unwrap();
        let pixels: Vec<usize> = (0..p.flow.len())
            .filter(|&i| p.confidence[i] > 0.0)
            .step_by(7)
            .take(6)
            .collect();
        for &pix in &pixels {
            for axis in 0..2 {
                let fd = finite_difference(&p, &out.pose, |q, h| q.flow[pix][axis] += h, 1e-4);
                let an = jac.d_pose_d_flow.column(2 * pix + axis).into_owned();
                assert!(
                    (fd - an).norm() <= 1e-4 * an.norm().max(1e-6),
                    "flow {pix}/{axis}: {fd} vs {an}"
                );
            }
            let fd = finite_difference(&p, &out.pose, |q, h| q.confidence[pix] += h, 1e-4);
            let an = jac.d_pose_d_weight.column(pix).into_owned();
            assert!(
                (fd - an).norm() <= 1e-3 * an.norm().max(1e-9),
                "weight {pix}: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn zero_weight_columns_and_scale_invariance() {
        let mut p = noisy_problem(12);
        let off: Vec<usize> = (0..p.flow.len())
            .filter(|&i| p.confidence[i] > 0.0)
            .step_by(5)
            .collect();
        for &i in &off {
            p.confidence[i] = 0.0;
        }
        let (out, jac) = refine_pose_grad_with(&p, &SolverConfig::tight()).unwrap();
        for &i in &off {
            assert!(jac.d_pose_d_flow.column(2 * i).iter().all(|v| *v == 0.0));
            assert!(jac.d_pose_d_flow.column(2 * i + 1).iter().all(|v| *v == 0.0));
            assert!(jac.d_pose_d_weight.column(i).iter().all(|v| *v == 0.0));
        }
        let w = nalgebra::DVector::from_vec(p.confidence.clone());
        let along = &jac.d_pose_d_weight * &w;
        assert!(along.norm() < 1e-6 * jac.d_pose_d_weight.norm());

        let mut scaled = p.clone();
        scaled.confidence.iter_mut().for_each(|c| *c *= 0.5);
        let half = refine_pose_with(&scaled, &SolverConfig::tight()).unwrap().pose;
        assert!(half.rotation_error(&out.pose) < 1e-9);
        assert!(half.translation_error(&out.pose) < 1e-10);
    }

    #[test]
    fn lm_never_accepts_an_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for seed in 0..20 {
            let p = noisy_problem(100 + seed);
            let mut q = p.clone();
            q.pose_init = jitter(&p.pose_init, &mut rng, 0.3, 0.03);
            if let Ok(out) = refine_pose(&q) {
                assert!(out.trace.lm_monotone(), "{:?}", out.trace);
            }
        }
    }
}
