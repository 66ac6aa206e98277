use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use super::{GeomError, Pose};

/// Keyframes on each side of the anchor used for local alignment.
pub const DEFAULT_ALIGN_WINDOW: usize = 10;
const COLLINEAR_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Sum of squared distances between `dst` and the transformed `src`.
    pub fn residual(&self, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
        src.iter()
            .zip(dst)
            .map(|(s, d)| (d - self.apply(s)).norm_squared())
            .sum()
    }
}

/// Least-squares similarity (or rigid, without scale) taking `src` onto `dst`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<SimTransform, GeomError> {
    if src.len() != dst.len() {
        return Err(GeomError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(GeomError::TooFewPoints {
            needed: 3,
            got: src.len(),
        });
    }
    let n = src.len() as f64;
    let mu_s = src.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mu_d = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::<f64>::zeros();
    let mut var_s = 0.0;
    let mut scatter = Matrix3::<f64>::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        scatter += a * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let spread = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= COLLINEAR_TOLERANCE * ev[0] {
        return Err(GeomError::Degenerate("source points are collinear".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let mut sign = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * vt.determinant() < 0.0 {
        sign[order[2]] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&sign) * vt;
    let scale = if with_scale {
        svd.singular_values.dot(&sign) / var_s
    } else {
        1.0
    };
    let translation = mu_d - scale * (rotation * mu_s);
    Ok(SimTransform {
        scale,
        rotation,
        translation,
    })
}

/// Relocalization error after rigidly aligning the map to ground truth over
/// the keyframes within `window` of `anchor`: the distance between the
/// aligned camera center of `reloc_pose` and `query_gt`.
pub fn local_alignment_error(
    map_positions: &BTreeMap<u32, Vector3<f64>>,
    gt_positions: &BTreeMap<u32, Vector3<f64>>,
    anchor: u32,
    window: u32,
    reloc_pose: &Pose,
    query_gt: &Vector3<f64>,
) -> Result<f64, GeomError> {
    let lo = anchor.saturating_sub(window);
    let hi = anchor.saturating_add(window);
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (id, p) in map_positions.range(lo..=hi) {
        if let Some(g) = gt_positions.get(id) {
            src.push(*p);
            dst.push(*g);
        }
    }
    if src.len() < 3 {
        return Err(GeomError::InsufficientWindow {
            found: src.len(),
            needed: 3,
        });
    }
    let t = umeyama(&src, &dst, false)?;
    Ok((t.apply(&reloc_pose.center()) - query_gt).norm())
}
