use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::refine::{solve_reprojection, SolverConfig};
use super::Correspondence;
use crate::error::{Error, Result};
use crate::geom::{kabsch, Intrinsics, Pose, Vec2, Vec3, MIN_DEPTH};

/// Eigenvalue ratio below which the points are treated as coplanar.
const PLANAR_RATIO: f64 = 1e-6;
/// Eigenvalue ratio below which the points are treated as collinear.
const LINEAR_RATIO: f64 = 1e-10;

/// Pose from at least four 2D-3D correspondences.
///
/// Points are expressed as barycentric combinations of control points (the
/// centroid plus the principal axes; three control points when the points are
/// coplanar). The control points' camera coordinates lie in the null space of
/// the projection constraints; their scale comes from preserving the control
/// point distances. Candidates from one, two and three null-space vectors
/// are each refined by Gauss-Newton on the combination weights, aligned to
/// the model points by Kabsch, and the candidate with the smallest
/// reprojection error is polished by pose-level Gauss-Newton.
pub fn epnp(corr: &[Correspondence], k: &Intrinsics) -> Result<Pose> {
    if corr.len() < 4 {
        return Err(Error::TooFewCorrespondences {
            needed: 4,
            got: corr.len(),
        });
    }
    if corr
        .iter()
        .any(|c| !c.point3d.iter().chain(c.point2d.iter()).all(|v| v.is_finite()))
    {
        return Err(Error::NonFinite("correspondences"));
    }
    let points: Vec<Vec3> = corr.iter().map(|c| c.point3d).collect();
    let pixels: Vec<Vec2> = corr.iter().map(|c| c.point2d).collect();

    let pose = closed_form(&points, &pixels, k)?;
    let weights = vec![1.0; corr.len()];
    let pose = match solve_reprojection(&points, &pixels, &weights, k, &pose, &SolverConfig::default()) {
        Ok((polished, _)) => polished,
        Err(Error::BehindCamera { .. }) => pose,
        Err(e) => return Err(e),
    };
    for (index, x) in points.iter().enumerate() {
        let z = pose.transform(x).z;
        if z <= MIN_DEPTH {
            return Err(Error::BehindCamera { index, z });
        }
    }
    Ok(pose)
}

struct ControlPoints {
    world: Vec<Vec3>,
    alphas: Vec<Vec<f64>>,
}

fn control_points(points: &[Vec3]) -> Result<ControlPoints> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vec3>() / n;
    let cov = points
        .iter()
        .map(|p| (p - centroid) * (p - centroid).transpose())
        .sum::<nalgebra::Matrix3<f64>>()
        / n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    if !(lambda[0] > 0.0) || lambda[1] < LINEAR_RATIO * lambda[0] {
        return Err(Error::Degenerate("3D points are collinear or coincident".into()));
    }
    let axes = if lambda[2] < PLANAR_RATIO * lambda[0] { 2 } else { 3 };
    let dirs: Vec<Vec3> = order[..axes]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    let scales: Vec<f64> = lambda[..axes].iter().map(|l| l.sqrt()).collect();

    let mut world = vec![centroid];
    for a in 0..axes {
        world.push(centroid + scales[a] * dirs[a]);
    }
    let alphas = points
        .iter()
        .map(|p| {
            let d = p - centroid;
            let mut alpha = vec![0.0; axes + 1];
            for a in 0..axes {
                alpha[a + 1] = dirs[a].dot(&d) / scales[a];
            }
            alpha[0] = 1.0 - alpha[1..].iter().sum::<f64>();
            alpha
        })
        .collect();
    Ok(ControlPoints { world, alphas })
}

fn closed_form(points: &[Vec3], pixels: &[Vec2], k: &Intrinsics) -> Result<Pose> {
    let ctrl = control_points(points)?;
    let m = ctrl.world.len();
    let dim = 3 * m;

    // M^T M accumulated from the two projection rows of every point
    let mut mtm = DMatrix::<f64>::zeros(dim, dim);
    let mut row = DVector::<f64>::zeros(dim);
    for (alpha, px) in ctrl.alphas.iter().zip(pixels) {
        let un = (px.x - k.cx) / k.fx;
        let vn = (px.y - k.cy) / k.fy;
        for (axis, coef) in [(0usize, un), (1usize, vn)] {
            row.fill(0.0);
            for j in 0..m {
                row[3 * j + axis] = alpha[j];
                row[3 * j + 2] = -alpha[j] * coef;
            }
            mtm.ger(1.0, &row, &row, 1.0);
        }
    }
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let null: Vec<DVector<f64>> = order[..4.min(dim)]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
    let dist2: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| (ctrl.world[a] - ctrl.world[b]).norm_squared())
        .collect();
    // dv[p][k]: difference of control points a, b within null vector k
    let diff = |v: &DVector<f64>, a: usize, b: usize| -> Vec3 {
        Vec3::new(
            v[3 * a] - v[3 * b],
            v[3 * a + 1] - v[3 * b + 1],
            v[3 * a + 2] - v[3 * b + 2],
        )
    };
    let dv: Vec<Vec<Vec3>> = pairs
        .iter()
        .map(|&(a, b)| null.iter().map(|v| diff(v, a, b)).collect())
        .collect();

    let mut candidates: Vec<Vec<f64>> = Vec::new();
    {
        let (mut num, mut den) = (0.0, 0.0);
        for (p, d2) in dv.iter().zip(&dist2) {
            let l = p[0].norm();
            num += l * d2.sqrt();
            den += l * l;
        }
        if den > 0.0 {
            candidates.push(vec![num / den]);
        }
    }
    if let Some(b) = quadratic_betas(&dv, &dist2, 2) {
        candidates.push(b);
    }
    if m == 4 {
        if let Some(b) = quadratic_betas(&dv, &dist2, 3) {
            candidates.push(b);
        }
    }

    // with four control points the null space can be four-dimensional (n = 4),
    // so every candidate is refined over all available null vectors
    let width = if m == 4 { null.len().min(4) } else { 0 };
    let mut best: Option<(f64, Pose)> = None;
    for mut betas in candidates {
        betas.resize(betas.len().max(width), 0.0);
        let betas = gauss_newton_betas(&dv, &dist2, betas);
        let Some(pose) = pose_from_betas(&betas, &null, &ctrl, points) else {
            continue;
        };
        let err = reprojection_error(&pose, points, pixels, k);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Degenerate("no EPnP candidate produced a valid pose".into()))
}

/// Linearized distance constraints for `n` null vectors, solved for the
/// products `beta_i beta_j` and converted back to signed betas.
fn quadratic_betas(dv: &[Vec<Vec3>], dist2: &[f64], n: usize) -> Option<Vec<f64>> {
    let prods: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    if dv.len() < prods.len() || dv.first()?.len() < n {
        return None;
    }
    let l = DMatrix::from_fn(dv.len(), prods.len(), |r, c| {
        let (i, j) = prods[c];
        let f = if i == j { 1.0 } else { 2.0 };
        f * dv[r][i].dot(&dv[r][j])
    });
    let rho = DVector::from_column_slice(dist2);
    let x = l.svd(true, true).solve(&rho, 1e-12).ok()?;
    let diag = |i: usize| x[prods.iter().position(|&p| p == (i, i)).unwrap()];
    let cross = |j: usize| x[prods.iter().position(|&p| p == (0, j)).unwrap()];
    let sign = if diag(0) < 0.0 { -1.0 } else { 1.0 };
    let b0 = (sign * diag(0)).max(0.0).sqrt();
    let mut betas = vec![b0];
    for j in 1..n {
        let bj = (sign * diag(j)).max(0.0).sqrt();
        betas.push(if sign * cross(j) < 0.0 { -bj } else { bj });
    }
    Some(betas)
}

fn gauss_newton_betas(dv: &[Vec<Vec3>], dist2: &[f64], mut betas: Vec<f64>) -> Vec<f64> {
    let n = betas.len();
    for _ in 0..10 {
        let mut jac = DMatrix::zeros(dv.len(), n);
        let mut res = DVector::zeros(dv.len());
        for (r, p) in dv.iter().enumerate() {
            let v: Vec3 = (0..n).map(|i| betas[i] * p[i]).sum();
            res[r] = v.norm_squared() - dist2[r];
            for i in 0..n {
                jac[(r, i)] = 2.0 * v.dot(&p[i]);
            }
        }
        let Ok(step) = jac.svd(true, true).solve(&res, 1e-14) else {
            break;
        };
        if !step.iter().all(|s| s.is_finite()) {
            break;
        }
        for i in 0..n {
            betas[i] -= step[i];
        }
        if step.norm() < 1e-14 * betas.iter().map(|b| b.abs()).sum::<f64>().max(1e-300) {
            break;
        }
    }
    betas
}

fn pose_from_betas(betas: &[f64], null: &[DVector<f64>], ctrl: &ControlPoints, points: &[Vec3]) -> Option<Pose> {
    let m = ctrl.world.len();
    let mut cam_ctrl = vec![Vec3::zeros(); m];
    for (b, v) in betas.iter().zip(null) {
        for (j, c) in cam_ctrl.iter_mut().enumerate() {
            *c += *b * Vec3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]);
        }
    }
    let mut cam: Vec<Vec3> = ctrl
        .alphas
        .iter()
        .map(|a| a.iter().zip(&cam_ctrl).map(|(w, c)| *w * c).sum())
        .collect();
    if cam.iter().map(|p| p.z).sum::<f64>() < 0.0 {
        cam.iter_mut().for_each(|p| *p = -*p);
    }
    let pose = kabsch(points, &cam, None).ok()?;
    pose.is_valid(1e-6).then_some(pose)
}

fn reprojection_error(pose: &Pose, points: &[Vec3], pixels: &[Vec2], k: &Intrinsics) -> f64 {
    points
        .iter()
        .zip(pixels)
        .map(|(x, px)| match k.project(&pose.transform(x)) {
            Some(p) => (p - px).norm_squared(),
            None => f64::INFINITY,
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::random_rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 480.0, 320.0, 240.0).unwrap()
    }

    fn instance(rng: &mut ChaCha8Rng, n: usize, planar: bool) -> (Pose, Vec<Correspondence>) {
        let pose = Pose::new(
            random_rotation(rng),
            Vec3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(1.0..3.0),
            ),
        );
        let corr = (0..n)
            .map(|_| {
                let z = if planar { 0.0 } else { rng.random_range(-0.3..0.3) };
                let x = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), z);
                Correspondence::new(x, k().project(&pose.transform(&x)).unwrap())
            })
            .collect();
        (pose, corr)
    }

    #[test]
    fn recovers_generating_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in [4usize, 5, 8, 20, 50] {
            for _ in 0..5 {
                let (gt, corr) = instance(&mut rng, n, false);
                let pose = epnp(&corr, &k()).unwrap();
                assert!(pose.rotation_error(&gt) < 1e-6, "n = {n}: {}", pose.rotation_error(&gt));
                assert!(pose.translation_error(&gt) < 1e-8);
            }
        }
    }

    #[test]
    fn recovers_planar_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for n in [5usize, 8, 30] {
            for _ in 0..5 {
                let (gt, corr) = instance(&mut rng, n, true);
                let pose = epnp(&corr, &k()).unwrap();
                assert!(pose.rotation_error(&gt) < 1e-5);
            }
        }
    }

    #[test]
    fn closed_form_alone_is_accurate_on_exact_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (gt, corr) = instance(&mut rng, 12, false);
        let pts: Vec<Vec3> = corr.iter().map(|c| c.point3d).collect();
        let px: Vec<Vec2> = corr.iter().map(|c| c.point2d).collect();
        let pose = closed_form(&pts, &px, &k()).unwrap();
        assert!(pose.rotation_error(&gt) < 1e-6);
        assert!(reprojection_error(&pose, &pts, &px, &k()).sqrt() / 12.0 < 1e-4);
    }

    #[test]
    fn too_few_and_degenerate_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (_, corr) = instance(&mut rng, 3, false);
        assert!(matches!(
            epnp(&corr, &k()),
            Err(Error::TooFewCorrespondences { needed: 4, got: 3 })
        ));
        let line: Vec<Correspondence> = (0..6)
            .map(|i| Correspondence::new(Vec3::new(i as f64 * 0.1, 0.0, 2.0), Vec2::new(320.0 + i as f64, 240.0)))
            .collect();
        assert!(matches!(epnp(&line, &k()), Err(Error::Degenerate(_))));
    }
}
