//! Training objectives and pose-noise recipes. All losses are means over
//! their mask so values are comparable across image sizes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::correspondence::{ClassTensor, OffsetTensor};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geom::{euler_xyz, Pose, Vec2, Vec3};

/// Weight of the regression term in the coarse loss.
pub const REG_WEIGHT: f64 = 2.0;
/// Weights of the certainty and pose terms in the refiner loss.
pub const CERT_WEIGHT: f64 = 5.0;
pub const POSE_WEIGHT: f64 = 20.0;

const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_coarse: f64,
    pub l_flow: f64,
    pub l_cert: f64,
    pub l_pose: f64,
    pub l_refiner: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseLoss {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_coarse: f64,
}

/// Cross-entropy over every cell plus L1 offset error over matched cells.
pub fn coarse_loss(
    c: &ClassTensor,
    u: &OffsetTensor,
    gt_class: &[usize],
    gt_offset: &[Option<Vec2>],
) -> Result<CoarseLoss> {
    let cells = c.num_cells();
    if u.grid() != c.grid() || gt_class.len() != cells || gt_offset.len() != cells {
        return Err(Error::ShapeMismatch(format!(
            "{cells} cells vs {} labels, {} offsets, offset grid {}",
            gt_class.len(),
            gt_offset.len(),
            u.grid()
        )));
    }
    let k = c.num_classes();
    let mut cls = 0.0;
    for (cell, &g) in gt_class.iter().enumerate() {
        if g >= k {
            return Err(Error::InvalidParameter(format!(
                "label {g} out of range for {k} classes"
            )));
        }
        cls -= c.cell(cell)[g].max(f64::MIN_POSITIVE).ln();
    }
    let l_cls = cls / cells as f64;
    let (mut reg, mut matched) = (0.0, 0usize);
    for (cell, gt) in gt_offset.iter().enumerate() {
        if let Some(gt) = gt {
            let d = u.get(cell) - gt;
            reg += d.x.abs() + d.y.abs();
            matched += 1;
        }
    }
    let l_reg = if matched > 0 { reg / matched as f64 } else { 0.0 };
    Ok(CoarseLoss {
        l_cls,
        l_reg,
        l_coarse: l_cls + REG_WEIGHT * l_reg,
    })
}

/// Laplace negative log-likelihood `|mu - gt|_1 / b + 2 ln b`, averaged over `mask`.
pub fn flow_nll(f: &FlowField, gt_flow: &[Vec2], mask: &[bool]) -> Result<f64> {
    Ok(flow_nll_with_grad(f, gt_flow, mask)?.0)
}

/// [`flow_nll`] with its gradient with respect to `mu` and `b` (zero off the mask).
pub fn flow_nll_with_grad(f: &FlowField, gt_flow: &[Vec2], mask: &[bool]) -> Result<(f64, Vec<Vec2>, Vec<f64>)> {
    if gt_flow.len() != f.len() || mask.len() != f.len() {
        return Err(Error::ShapeMismatch(format!(
            "flow has {} pixels, ground truth {}, mask {}",
            f.len(),
            gt_flow.len(),
            mask.len()
        )));
    }
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::Empty("flow loss mask"));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut d_mu = vec![Vec2::zeros(); f.len()];
    let mut d_b = vec![0.0; f.len()];
    for i in (0..f.len()).filter(|&i| mask[i]) {
        let b = f.b[i];
        let r = f.mu[i] - gt_flow[i];
        let l1 = r.x.abs() + r.y.abs();
        total += l1 / b + 2.0 * b.ln();
        d_mu[i] = Vec2::new(r.x.signum(), r.y.signum()) * (inv_n / b);
        d_b[i] = (-l1 / (b * b) + 2.0 / b) * inv_n;
    }
    Ok((total * inv_n, d_mu, d_b))
}

/// Binary cross-entropy of certainty against "the flow lands on the query
/// object", averaged over the rendered mask.
///
/// All maps share the image size `width x height`; a target outside the
/// image is labeled 0.
pub fn certainty_bce(
    flow: &[Vec2],
    cert: &[f64],
    width: u32,
    height: u32,
    gt_mask_q: &[bool],
    render_mask: &[bool],
) -> Result<f64> {
    let n = width as usize * height as usize;
    if [flow.len(), cert.len(), gt_mask_q.len(), render_mask.len()]
        .iter()
        .any(|l| *l != n)
    {
        return Err(Error::ShapeMismatch(format!("certainty maps must have {n} entries")));
    }
    let count = render_mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::Empty("render mask"));
    }
    let mut total = 0.0;
    for i in (0..n).filter(|&i| render_mask[i]) {
        let center = Vec2::new((i % width as usize) as f64 + 0.5, (i / width as usize) as f64 + 0.5);
        let t = center + flow[i];
        let label = t.x >= 0.0
            && t.y >= 0.0
            && t.x < width as f64
            && t.y < height as f64
            && gt_mask_q[t.y as usize * width as usize + t.x as usize];
        let p = cert[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= if label { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / count as f64)
}

fn mean_l1(a: &Pose, b: &Pose, pts: &[Vec3]) -> f64 {
    pts.iter()
        .map(|x| (a.transform(x) - b.transform(x)).abs().sum())
        .sum::<f64>()
        / pts.len() as f64
}

/// Disentangled point-matching loss: the predicted rotation, xy-translation
/// and depth are each substituted into the ground truth in turn.
pub fn pose_loss(p: &Pose, gt: &Pose, pts: &[Vec3]) -> Result<f64> {
    if pts.is_empty() {
        return Err(Error::Empty("pose loss points"));
    }
    let rot = Pose::new(p.rotation, gt.translation);
    let xy = Pose::new(
        gt.rotation,
        Vec3::new(p.translation.x, p.translation.y, gt.translation.z),
    );
    let z = Pose::new(
        gt.rotation,
        Vec3::new(gt.translation.x, gt.translation.y, p.translation.z),
    );
    Ok(mean_l1(&rot, gt, pts) + mean_l1(&xy, gt, pts) + mean_l1(&z, gt, pts))
}

pub fn refiner_loss(l_flow: f64, l_cert: f64, l_pose: f64) -> f64 {
    l_flow + CERT_WEIGHT * l_cert + POSE_WEIGHT * l_pose
}

impl LossBreakdown {
    pub fn new(coarse: CoarseLoss, l_flow: f64, l_cert: f64, l_pose: f64) -> Self {
        Self {
            l_cls: coarse.l_cls,
            l_reg: coarse.l_reg,
            l_coarse: coarse.l_coarse,
            l_flow,
            l_cert,
            l_pose,
            l_refiner: refiner_loss(l_flow, l_cert, l_pose),
        }
    }
}

/// Translation tolerance (meters, per camera axis) of a positive hypothesis.
pub const POSITIVE_TRANSLATION: [f64; 3] = [0.01, 0.01, 0.05];
/// Rotation tolerance (degrees) of a positive hypothesis.
pub const POSITIVE_ROTATION_DEG: f64 = 5.0;

pub fn selection_label(p: &Pose, gt: &Pose) -> bool {
    let d = p.translation - gt.translation;
    (0..3).all(|i| d[i].abs() <= POSITIVE_TRANSLATION[i]) && p.rotation_error(gt).to_degrees() <= POSITIVE_ROTATION_DEG
}

/// Standard deviations of the pose noise used to build refiner inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseNoise {
    /// Per-axis translation sigma (meters).
    pub translation: [f64; 3],
    /// Per-Euler-axis rotation sigma (degrees).
    pub rotation_deg: f64,
}

impl Default for PoseNoise {
    fn default() -> Self {
        Self {
            translation: [0.01, 0.01, 0.05],
            rotation_deg: 15.0,
        }
    }
}

impl PoseNoise {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            translation: self.translation.map(|t| t * s),
            rotation_deg: self.rotation_deg * s,
        }
    }
}

/// Gaussian perturbation of `gt`: translation noise in the camera frame and
/// an x-y-z Euler rotation applied in the model frame.
pub fn perturb_pose<R: Rng + ?Sized>(gt: &Pose, noise: &PoseNoise, rng: &mut R) -> Pose {
    let mut gauss = |sigma: f64| -> f64 {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
        } else {
            0.0
        }
    };
    let t = Vec3::new(
        gauss(noise.translation[0]),
        gauss(noise.translation[1]),
        gauss(noise.translation[2]),
    );
    let s = noise.rotation_deg.to_radians();
    let r = euler_xyz(gauss(s), gauss(s), gauss(s));
    Pose::new(gt.rotation * r, gt.translation + t)
}

/// One positive and five negative hypotheses for the selection model,
/// each paired with its label.
pub fn selection_samples<R: Rng + ?Sized>(gt: &Pose, noise: &PoseNoise, rng: &mut R) -> Vec<(Pose, bool)> {
    let mut out = Vec::with_capacity(6);
    let small = noise.scaled(0.2);
    let positive = loop {
        let p = perturb_pose(gt, &small, rng);
        if selection_label(&p, gt) {
            break p;
        }
    };
    out.push((positive, true));
    while out.len() < 6 {
        let p = perturb_pose(gt, noise, rng);
        if !selection_label(&p, gt) {
            out.push((p, false));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::{no_match_class, num_classes};
    use crate::geom::random_rotation;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_coarse_prediction_is_zero() {
        let g = 3;
        let classes: Vec<usize> = (0..9).map(|i| if i % 4 == 0 { no_match_class(g) } else { i }).collect();
        let offsets: Vec<Option<Vec2>> = (0..9)
            .map(|i| (i % 4 != 0).then(|| Vec2::new(0.1 * (i as f64 - 4.0) / 4.0, -0.2)))
            .collect();
        let c = ClassTensor::one_hot(g, &classes).unwrap();
        let u = OffsetTensor::new(g, offsets.iter().map(|o| o.unwrap_or_else(Vec2::zeros)).collect()).unwrap();
        let l = coarse_loss(&c, &u, &classes, &offsets).unwrap();
        assert_eq!(l.l_cls, 0.0);
        assert_eq!(l.l_reg, 0.0);
    }

    #[test]
    fn uniform_cross_entropy_is_log_k() {
        let c = ClassTensor::uniform(14);
        let labels = vec![5; 196];
        let l = coarse_loss(&c, &OffsetTensor::zeros(14), &labels, &vec![None; 196]).unwrap();
        assert!((l.l_cls - (num_classes(14) as f64).ln()).abs() < 1e-9);
        assert!((l.l_cls - 5.2832).abs() < 1e-4);
        assert_eq!(l.l_coarse, l.l_cls + 2.0 * l.l_reg);
    }

    #[test]
    fn single_matched_cell_l1() {
        let mut offsets = vec![Vec2::zeros(); 4];
        offsets[2] = Vec2::new(0.1, -0.2);
        let mut gt = vec![None; 4];
        gt[2] = Some(Vec2::zeros());
        let c = ClassTensor::uniform(2);
        let l = coarse_loss(&c, &OffsetTensor::new(2, offsets).unwrap(), &[0, 1, 2, 3], &gt).unwrap();
        assert!((l.l_reg - 0.3).abs() < 1e-15);
        assert!((l.l_coarse - (l.l_cls + 0.6)).abs() < 1e-12);
    }

    #[test]
    fn coarse_loss_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let g = 4;
        let k = num_classes(g);
        let mut cells: Vec<(Vec<f64>, usize, Vec2, Option<Vec2>)> = (0..16)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                let label = rng.random_range(0..k);
                let off = Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                let gt = rng
                    .random_bool(0.6)
                    .then(|| Vec2::new(rng.random_range(-0.5..0.5), 0.0));
                (raw.iter().map(|v| v / s).collect(), label, off, gt)
            })
            .collect();
        let eval = |cells: &[(Vec<f64>, usize, Vec2, Option<Vec2>)]| {
            let c = ClassTensor::new(g, cells.iter().flat_map(|c| c.0.clone()).collect()).unwrap();
            let u = OffsetTensor::new(g, cells.iter().map(|c| c.2).collect()).unwrap();
            let labels: Vec<usize> = cells.iter().map(|c| c.1).collect();
            let gts: Vec<Option<Vec2>> = cells.iter().map(|c| c.3).collect();
            coarse_loss(&c, &u, &labels, &gts).unwrap().l_coarse
        };
        let a = eval(&cells);
        cells.shuffle(&mut rng);
        assert!((eval(&cells) - a).abs() < 1e-12);
    }

    #[test]
    fn coarse_loss_shape_errors() {
        let c = ClassTensor::uniform(2);
        assert!(coarse_loss(&c, &OffsetTensor::zeros(3), &[0; 4], &[None; 4]).is_err());
        assert!(coarse_loss(&c, &OffsetTensor::zeros(2), &[0; 3], &[None; 4]).is_err());
    }

    fn one_pixel(mu: Vec2, b: f64) -> FlowField {
        FlowField::new(1, 1, vec![mu], vec![b], vec![1.0], vec![1.0]).unwrap()
    }

    #[test]
    fn flow_nll_values() {
        assert_eq!(
            flow_nll(&one_pixel(Vec2::new(1.0, 2.0), 1.0), &[Vec2::new(1.0, 2.0)], &[true]).unwrap(),
            0.0
        );
        let v = flow_nll(&one_pixel(Vec2::new(1.0, 0.0), 2.0), &[Vec2::zeros()], &[true]).unwrap();
        assert!((v - (0.5 + 2.0 * 2f64.ln())).abs() < 1e-15);
        assert!((v - 1.8863).abs() < 1e-4);
        assert!(matches!(
            flow_nll(&one_pixel(Vec2::zeros(), 1.0), &[Vec2::zeros()], &[false]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn flow_nll_minimized_at_half_residual() {
        for r in [0.3, 1.0, 4.0] {
            let at = |b: f64| flow_nll(&one_pixel(Vec2::new(r, 0.0), b), &[Vec2::zeros()], &[true]).unwrap();
            assert!(at(r / 2.0) < at(r));
            assert!(at(r / 2.0) < at(r / 2.0 * 1.01));
            assert!(at(r / 2.0) < at(r / 2.0 * 0.99));
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn flow_nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let n = 30;
        let f = FlowField::new(
            n,
            1,
            (0..n)
                .map(|_| Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
                .collect(),
            (0..n).map(|_| rng.random_range(0.2..3.0)).collect(),
            vec![1.0; n as usize],
            vec![1.0; n as usize],
        )
        .unwrap();
        let gt: Vec<Vec2> = (0..n)
            .map(|_| Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let (_, d_mu, d_b) = flow_nll_with_grad(&f, &gt, &mask).unwrap();
        let h = 1e-6;
        for i in 0..n as usize {
            for axis in 0..2 {
                let mut p = f.clone();
                p.mu[i][axis] += h;
                let mut m = f.clone();
                m.mu[i][axis] -= h;
                let fd = (flow_nll(&p, &gt, &mask).unwrap() - flow_nll(&m, &gt, &mask).unwrap()) / (2.0 * h);
                assert!((fd - d_mu[i][axis]).abs() <= 1e-4 * d_mu[i][axis].abs().max(1e-3));
            }
            let mut p = f.clone();
            p.b[i] += h;
            let mut m = f.clone();
            m.b[i] -= h;
            let fd = (flow_nll(&p, &gt, &mask).unwrap() - flow_nll(&m, &gt, &mask).unwrap()) / (2.0 * h);
            assert!((fd - d_b[i]).abs() <= 1e-4 * d_b[i].abs().max(1e-3));
        }
    }

    #[test]
    fn certainty_bce_values() {
        let (w, h) = (4u32, 4u32);
        let n = 16;
        let render = vec![true; n];
        let query: Vec<bool> = (0..n).map(|i| i % 4 < 2).collect();
        let flow = vec![Vec2::new(0.25, 0.0); n];
        let labels: Vec<f64> = query.iter().map(|q| if *q { 1.0 } else { 0.0 }).collect();
        assert!(certainty_bce(&flow, &labels, w, h, &query, &render).unwrap() < 1e-5);
        let half = vec![0.5; n];
        assert!((certainty_bce(&flow, &half, w, h, &query, &render).unwrap() - 2f64.ln()).abs() < 1e-12);
        let away = vec![Vec2::new(100.0, 0.0); n];
        assert!(certainty_bce(&away, &vec![0.0; n], w, h, &vec![true; n], &render).unwrap() < 1e-5);
        assert!(matches!(
            certainty_bce(&flow, &half, w, h, &query, &vec![false; n]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn pose_loss_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let pts: Vec<Vec3> = (0..50)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) * 0.1)
            .collect();
        let gt = Pose::new(random_rotation(&mut rng), Vec3::new(0.01, -0.02, 0.5));
        assert_eq!(pose_loss(&gt, &gt, &pts).unwrap(), 0.0);
        let mut p = gt;
        p.translation.z += 0.03;
        assert!((pose_loss(&p, &gt, &pts).unwrap() - 0.03).abs() < 1e-15);
        assert!(pose_loss(&p, &gt, &[]).is_err());
    }

    #[test]
    fn pose_loss_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let pts: Vec<Vec3> = (0..40)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) * 0.1)
            .collect();
        for _ in 0..10 {
            let gt = Pose::new(
                random_rotation(&mut rng),
                Vec3::new(rng.random(), rng.random(), 1.0 + rng.random::<f64>()),
            );
            let p = Pose::new(
                random_rotation(&mut rng),
                Vec3::new(rng.random(), rng.random(), 1.0 + rng.random::<f64>()),
            );
            let mut expected = 0.0;
            for x in &pts {
                let g = gt.rotation * x + gt.translation;
                let a = p.rotation * x + gt.translation;
                let b = gt.rotation * x + Vec3::new(p.translation[0], p.translation[1], gt.translation[2]);
                let c = gt.rotation * x + Vec3::new(gt.translation[0], gt.translation[1], p.translation[2]);
                for v in [a, b, c] {
                    expected += ((v - g)[0]).abs() + ((v - g)[1]).abs() + ((v - g)[2]).abs();
                }
            }
            expected /= pts.len() as f64;
            assert!((pose_loss(&p, &gt, &pts).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_loss_zero_only_when_each_substitution_agrees() {
        // a symmetric point set under a symmetry rotation still registers a
        // rotation error because points are compared pairwise
        let pts = vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(-0.1, 0.0, 0.0)];
        let gt = Pose::from_translation(Vec3::new(0.0, 0.0, 1.0));
        let flipped = Pose::from_axis_angle(Vec3::new(0.0, 0.0, std::f64::consts::PI), gt.translation);
        assert!(pose_loss(&flipped, &gt, &pts).unwrap() > 0.1);
        let about_axis = Pose::from_axis_angle(Vec3::new(0.7, 0.0, 0.0), gt.translation);
        assert!(pose_loss(&about_axis, &gt, &pts).unwrap() < 1e-15);
    }

    #[test]
    fn refiner_loss_weights() {
        assert_eq!(refiner_loss(0.0, 0.0, 0.0), 0.0);
        assert_eq!(refiner_loss(1.0, 1.0, 1.0), 26.0);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..20 {
            let (a, b, c) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
            assert!((refiner_loss(a, b, c) - (a + 5.0 * b + 20.0 * c)).abs() < 1e-12);
            let lb = LossBreakdown::new(
                CoarseLoss {
                    l_cls: a,
                    l_reg: b,
                    l_coarse: a + 2.0 * b,
                },
                a,
                b,
                c,
            );
            assert!((lb.l_refiner - (lb.l_flow + 5.0 * lb.l_cert + 20.0 * lb.l_pose)).abs() < 1e-9);
        }
    }

    #[test]
    fn selection_label_thresholds() {
        let gt = Pose::from_translation(Vec3::new(0.0, 0.0, 1.0));
        assert!(selection_label(&gt, &gt));
        let p = Pose::from_axis_angle(Vec3::new(4f64.to_radians(), 0.0, 0.0), Vec3::new(0.0, 0.0, 1.04));
        assert!(selection_label(&p, &gt));
        let p = Pose::from_axis_angle(Vec3::new(0.0, 6f64.to_radians(), 0.0), gt.translation);
        assert!(!selection_label(&p, &gt));
        let p = Pose::from_translation(Vec3::new(0.011, 0.0, 1.0));
        assert!(!selection_label(&p, &gt));
    }

    #[test]
    fn perturbation_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let gt = Pose::from_translation(Vec3::new(0.0, 0.0, 1.0));
        let noise = PoseNoise::default();
        let n = 20000;
        let mut sq = Vec3::zeros();
        for _ in 0..n {
            let p = perturb_pose(&gt, &noise, &mut rng);
            sq += (p.translation - gt.translation).component_mul(&(p.translation - gt.translation));
        }
        let sd = (sq / n as f64).map(f64::sqrt);
        for i in 0..3 {
            assert!((sd[i] / noise.translation[i] - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn one_positive_five_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let gt = Pose::from_translation(Vec3::new(0.0, 0.0, 1.0));
        let s = selection_samples(&gt, &PoseNoise::default(), &mut rng);
        assert_eq!(s.len(), 6);
        assert_eq!(s.iter().filter(|(_, l)| *l).count(), 1);
        for (p, l) in &s {
            assert_eq!(selection_label(p, &gt), *l);
        }
    }
}
