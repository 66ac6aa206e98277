use nalgebra::{DMatrix, Matrix3, Matrix4, Matrix6, Rotation3, Vector3, Vector6};

use super::{adaptive_iterations, orthonormalize, skew, GeomError, Intrinsics, Pixel, Pose};
use crate::rng::XorShift64Star;

const SAMPLE: usize = 6;
const MAX_GN_ITERS: usize = 100;
const MAX_HALVINGS: usize = 40;
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PnpRansac {
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub iterations: usize,
}

/// Pixel distance between the projection of `point` and `pixel`; infinite
/// for points at or behind the camera.
pub fn reprojection_error(pose: &Pose, k: &Intrinsics, point: &Vector3<f64>, pixel: &Pixel) -> f64 {
    match k.project(&pose.transform(point)) {
        Some(p) => (p - pixel).norm(),
        None => f64::INFINITY,
    }
}

pub fn reprojection_inliers(
    pose: &Pose,
    k: &Intrinsics,
    points: &[Vector3<f64>],
    pixels: &[Pixel],
    threshold_px: f64,
) -> Vec<bool> {
    points
        .iter()
        .zip(pixels)
        .map(|(x, p)| reprojection_error(pose, k, x, p) <= threshold_px)
        .collect()
}

fn check_inputs(points: &[Vector3<f64>], pixels: &[Pixel]) -> Result<(), GeomError> {
    if points.len() != pixels.len() {
        return Err(GeomError::LengthMismatch(points.len(), pixels.len()));
    }
    if points.len() < SAMPLE {
        return Err(GeomError::TooFewPoints {
            needed: SAMPLE,
            got: points.len(),
        });
    }
    Ok(())
}

/// World-to-camera pose from 3D-2D correspondences: linear DLT on
/// normalized image coordinates, then Gauss-Newton on pixel reprojection
/// error with step halving.
pub fn pnp_solve(points: &[Vector3<f64>], pixels: &[Pixel], k: &Intrinsics) -> Result<Pose, GeomError> {
    check_inputs(points, pixels)?;
    let init = dlt(points, pixels, k)?;
    refine(points, pixels, k, init).map(|(pose, _)| pose)
}

fn dlt(points: &[Vector3<f64>], pixels: &[Pixel], k: &Intrinsics) -> Result<Pose, GeomError> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let spread = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(GeomError::Degenerate("all 3D points coincide".into()));
    }
    let s = 3f64.sqrt() / spread;
    #[rustfmt::skip]
    let t3 = Matrix4::new(
        s, 0.0, 0.0, -s * c.x,
        0.0, s, 0.0, -s * c.y,
        0.0, 0.0, s, -s * c.z,
        0.0, 0.0, 0.0, 1.0,
    );
    let mut a = DMatrix::<f64>::zeros(2 * points.len(), 12);
    for (i, (x, px)) in points.iter().zip(pixels).enumerate() {
        let x = (x - c) * s;
        let uv = k.normalize(px);
        let h = [x.x, x.y, x.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = h[j];
            a[(2 * i, 8 + j)] = -uv.x * h[j];
            a[(2 * i + 1, 4 + j)] = h[j];
            a[(2 * i + 1, 8 + j)] = -uv.y * h[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| GeomError::Degenerate("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|i, j| svd.singular_values[*i].total_cmp(&svd.singular_values[*j]));
    let largest = svd.singular_values[order[order.len() - 1]];
    if svd.singular_values[order[1]] <= RANK_TOLERANCE * largest {
        return Err(GeomError::Degenerate(
            "3D points do not constrain the projection".into(),
        ));
    }
    let pn = nalgebra::Matrix3x4::from_fn(|r, col| v_t[(order[0], 4 * r + col)]);
    let mut p = pn * t3;
    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let sv = m.svd(false, false).singular_values;
    let scale = sv.sum() / 3.0;
    if !(scale > 0.0) {
        return Err(GeomError::Degenerate("projection has no rotation part".into()));
    }
    let rotation = orthonormalize(&m);
    let translation = p.column(3) / scale;
    Ok(Pose::new(rotation, translation))
}

fn cost(points: &[Vector3<f64>], pixels: &[Pixel], k: &Intrinsics, pose: &Pose) -> f64 {
    let mut total = 0.0;
    for (x, px) in points.iter().zip(pixels) {
        match k.project(&pose.transform(x)) {
            Some(p) => total += (p - px).norm_squared(),
            None => return f64::INFINITY,
        }
    }
    total
}

/// Gauss-Newton with a left-multiplied rotation increment. Returns the pose
/// and the cost after every accepted step, starting with the initial cost.
pub(crate) fn refine(
    points: &[Vector3<f64>],
    pixels: &[Pixel],
    k: &Intrinsics,
    init: Pose,
) -> Result<(Pose, Vec<f64>), GeomError> {
    let n = points.len() as f64;
    let mut pose = init;
    let mut current = cost(points, pixels, k, &pose);
    if !current.is_finite() {
        return Err(GeomError::NotConverged { residual: current });
    }
    let mut history = vec![current];
    for _ in 0..MAX_GN_ITERS {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (x, px) in points.iter().zip(pixels) {
            let rx = pose.rotation * x;
            let xc = rx + pose.translation;
            let (z, z2) = (xc.z, xc.z * xc.z);
            let du = Vector3::new(k.fx / z, 0.0, -k.fx * xc.x / z2);
            let dv = Vector3::new(0.0, k.fy / z, -k.fy * xc.y / z2);
            let d_rot = -skew(&rx);
            let ju: Vector6<f64> = Vector6::from_iterator((du.transpose() * d_rot).iter().chain(du.iter()).copied());
            let jv: Vector6<f64> = Vector6::from_iterator((dv.transpose() * d_rot).iter().chain(dv.iter()).copied());
            let r = Pixel::new(k.fx * xc.x / z + k.cx, k.fy * xc.y / z + k.cy) - px;
            h += ju * ju.transpose() + jv * jv.transpose();
            g += ju * r.x + jv * r.y;
        }
        let step = match h.cholesky() {
            Some(ch) => -ch.solve(&g),
            None => match h.try_inverse() {
                Some(inv) => -(inv * g),
                None => return Err(GeomError::Degenerate("singular normal equations".into())),
            },
        };
        if step.norm() < 1e-15 {
            return Ok((pose, history));
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let s = step * alpha;
            let rot = Rotation3::new(Vector3::new(s[0], s[1], s[2])).into_inner();
            let cand = Pose::new(
                orthonormalize(&(rot * pose.rotation)),
                pose.translation + Vector3::new(s[3], s[4], s[5]),
            );
            let c = cost(points, pixels, k, &cand);
            if c <= current {
                accepted = Some((cand, c));
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, c)) = accepted else {
            // No decrease along the Gauss-Newton direction: at a minimum.
            return Ok((pose, history));
        };
        let gain = current - c;
        pose = cand;
        current = c;
        history.push(c);
        if gain <= 1e-14 * (1.0 + current) {
            return Ok((pose, history));
        }
    }
    Err(GeomError::NotConverged { residual: current / n })
}

/// Seeded RANSAC over six-point [`pnp_solve`] hypotheses, followed by a
/// final solve on all inliers; the refit is kept only when it does not lose
/// inliers.
pub fn ransac_pnp(
    points: &[Vector3<f64>],
    pixels: &[Pixel],
    k: &Intrinsics,
    threshold_px: f64,
    max_iters: usize,
    seed: u64,
) -> Result<PnpRansac, GeomError> {
    check_inputs(points, pixels)?;
    if !(threshold_px > 0.0) {
        return Err(GeomError::InvalidParameter(format!("threshold {threshold_px}")));
    }
    let n = points.len();
    let mut rng = XorShift64Star::new(seed);
    let mut best: Option<(Pose, Vec<bool>, usize)> = None;
    let mut budget = max_iters.max(1);
    let mut iterations = 0;
    let mut sp = Vec::with_capacity(SAMPLE);
    let mut sx = Vec::with_capacity(SAMPLE);
    while iterations < budget {
        iterations += 1;
        sp.clear();
        sx.clear();
        for i in rng.sample_indices(n, SAMPLE) {
            sp.push(points[i]);
            sx.push(pixels[i]);
        }
        let Ok(pose) = pnp_solve(&sp, &sx, k) else {
            continue;
        };
        let mask = reprojection_inliers(&pose, k, points, pixels, threshold_px);
        let count = mask.iter().filter(|m| **m).count();
        if best.as_ref().is_none_or(|b| count > b.2) {
            budget = adaptive_iterations(count, n, SAMPLE, max_iters.max(1));
            best = Some((pose, mask, count));
        }
    }
    let (mut pose, mut mask, mut count) =
        best.ok_or_else(|| GeomError::Degenerate("no sample produced a pose".into()))?;
    if count >= SAMPLE {
        let p: Vec<Vector3<f64>> = points.iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
        let x: Vec<Pixel> = pixels.iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
        if let Ok(refit) = pnp_solve(&p, &x, k) {
            let m2 = reprojection_inliers(&refit, k, points, pixels, threshold_px);
            let c2 = m2.iter().filter(|m| **m).count();
            if c2 >= count {
                pose = refit;
                mask = m2;
                count = c2;
            }
        }
    }
    Ok(PnpRansac {
        pose,
        inliers: mask,
        inlier_count: count,
        iterations,
    })
}
