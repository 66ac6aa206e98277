use nalgebra::{DMatrix, Matrix3, Vector3};

use super::{adaptive_iterations, GeomError, Pixel};
use crate::rng::XorShift64Star;

pub const DEFAULT_F_THRESHOLD_PX: f64 = 2.0;
const SAMPLE: usize = 8;
const MAX_REFITS: usize = 10;
const REWEIGHT_ROUNDS: usize = 5;
const LO_ROUNDS: usize = 10;
const LO_SUBSET: usize = 16;
/// A second null direction of the design matrix below this fraction of the
/// largest singular value means the correspondences do not pin down F.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalRansac {
    pub f: Matrix3<f64>,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub iterations: usize,
}

/// Similarity moving the points' centroid to the origin with mean distance
/// sqrt(2).
fn hartley(points: &[Pixel]) -> Result<Matrix3<f64>, GeomError> {
    let n = points.len() as f64;
    let c = points.iter().fold(Pixel::zeros(), |a, p| a + p) / n;
    let mean = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(GeomError::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Ok(Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0))
}

fn apply(t: &Matrix3<f64>, p: &Pixel) -> Pixel {
    let h = t * Vector3::new(p.x, p.y, 1.0);
    Pixel::new(h.x / h.z, h.y / h.z)
}

/// Normalized eight-point estimate from `x[i] <-> x2[i]`. The result has rank
/// 2, unit Frobenius norm and a positive largest-magnitude entry.
pub fn fundamental_8point(x1: &[Pixel], x2: &[Pixel]) -> Result<Matrix3<f64>, GeomError> {
    if x1.len() != x2.len() {
        return Err(GeomError::LengthMismatch(x1.len(), x2.len()));
    }
    if x1.len() < SAMPLE {
        return Err(GeomError::TooFewPoints {
            needed: SAMPLE,
            got: x1.len(),
        });
    }
    solve(x1, x2, None)
}

/// Linear solve of the (optionally row-weighted) epipolar constraints in
/// Hartley-normalized coordinates.
fn solve(x1: &[Pixel], x2: &[Pixel], weights: Option<&[f64]>) -> Result<Matrix3<f64>, GeomError> {
    let t1 = hartley(x1)?;
    let t2 = hartley(x2)?;
    // Zero padding keeps the full right singular basis available for
    // exactly eight correspondences.
    let rows = x1.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in x1.iter().zip(x2).enumerate() {
        let p = apply(&t1, p);
        let q = apply(&t2, q);
        let w = weights.map_or(1.0, |w| w[i]);
        let row = [q.x * p.x, q.x * p.y, q.x, q.y * p.x, q.y * p.y, q.y, p.x, p.y, 1.0];
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = w * v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| GeomError::Degenerate("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|i, j| svd.singular_values[*i].total_cmp(&svd.singular_values[*j]));
    let largest = svd.singular_values[order[order.len() - 1]];
    if svd.singular_values[order[1]] <= RANK_TOLERANCE * largest {
        return Err(GeomError::Degenerate("design matrix rank below 8".into()));
    }
    let fh = Matrix3::from_fn(|r, c| v_t[(order[0], 3 * r + c)]);

    // Denormalization preserves rank; a second truncation in pixel units
    // would cost accuracy on the small entries.
    let f = t2.transpose() * enforce_rank2(&fh) * t1;
    Ok(canonical_scale(&f))
}

/// Eight-point estimate followed by rounds of Sampson-weighted linear
/// solves, which move the algebraic fit towards the geometric one.
fn refit(x1: &[Pixel], x2: &[Pixel]) -> Result<Matrix3<f64>, GeomError> {
    let mut f = solve(x1, x2, None)?;
    for _ in 0..REWEIGHT_ROUNDS {
        let w: Vec<f64> = x1
            .iter()
            .zip(x2)
            .map(|(p, q)| {
                let d = sampson_denominator(&f, p, q);
                if d > 0.0 {
                    1.0 / d.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        match solve(x1, x2, Some(&w)) {
            Ok(next) => f = next,
            Err(_) => break,
        }
    }
    Ok(f)
}

fn enforce_rank2(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let mut s = svd.singular_values;
    let min = (0..3).min_by(|a, b| s[*a].total_cmp(&s[*b])).unwrap();
    s[min] = 0.0;
    svd.u.unwrap() * Matrix3::from_diagonal(&s) * svd.v_t.unwrap()
}

fn canonical_scale(f: &Matrix3<f64>) -> Matrix3<f64> {
    let f = f / f.norm();
    // Row-major scan, first maximum wins.
    let mut best = f[(0, 0)];
    for r in 0..3 {
        for c in 0..3 {
            if f[(r, c)].abs() > best.abs() {
                best = f[(r, c)];
            }
        }
    }
    if best < 0.0 {
        -f
    } else {
        f
    }
}

/// Sampson distance of `x <-> x2` under `F`, in pixels.
pub fn epipolar_error(f: &Matrix3<f64>, x: &Pixel, x2: &Pixel) -> f64 {
    let p = Vector3::new(x.x, x.y, 1.0);
    let q = Vector3::new(x2.x, x2.y, 1.0);
    let e = q.dot(&(f * p));
    let denom = sampson_denominator(f, x, x2);
    if denom <= 0.0 {
        return if e == 0.0 { 0.0 } else { f64::INFINITY };
    }
    e.abs() / denom.sqrt()
}

fn sampson_denominator(f: &Matrix3<f64>, x: &Pixel, x2: &Pixel) -> f64 {
    let fp = f * Vector3::new(x.x, x.y, 1.0);
    let ftq = f.transpose() * Vector3::new(x2.x, x2.y, 1.0);
    fp.x * fp.x + fp.y * fp.y + ftq.x * ftq.x + ftq.y * ftq.y
}

struct Hypothesis {
    f: Matrix3<f64>,
    mask: Vec<bool>,
    count: usize,
    /// Truncated quadratic cost: squared Sampson distance for inliers,
    /// squared threshold for everything else.
    cost: f64,
}

impl Hypothesis {
    fn score(f: Matrix3<f64>, x1: &[Pixel], x2: &[Pixel], threshold: f64) -> Self {
        let cap = threshold * threshold;
        let mut mask = Vec::with_capacity(x1.len());
        let mut count = 0;
        let mut cost = 0.0;
        for (p, q) in x1.iter().zip(x2) {
            let e = epipolar_error(&f, p, q);
            let inlier = e <= threshold;
            mask.push(inlier);
            if inlier {
                count += 1;
                cost += e * e;
            } else {
                cost += cap;
            }
        }
        Self { f, mask, count, cost }
    }

    fn better_than(&self, other: &Hypothesis) -> bool {
        self.cost < other.cost
    }
}

fn select(x1: &[Pixel], x2: &[Pixel], mask: &[bool]) -> (Vec<Pixel>, Vec<Pixel>) {
    let p = x1.iter().zip(mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
    let q = x2.iter().zip(mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
    (p, q)
}

/// Re-estimates on the inliers while that lowers the cost.
fn iterate_refit(x1: &[Pixel], x2: &[Pixel], threshold: f64, mut best: Hypothesis) -> Hypothesis {
    for _ in 0..MAX_REFITS {
        if best.count < SAMPLE {
            break;
        }
        let (p, q) = select(x1, x2, &best.mask);
        let Ok(f) = refit(&p, &q) else {
            break;
        };
        let next = Hypothesis::score(f, x1, x2, threshold);
        if !next.better_than(&best) {
            break;
        }
        best = next;
    }
    best
}

/// Local optimization of a promising hypothesis: iterated inlier refits,
/// then refits from random half-size subsets of the inliers so a single
/// stray outlier cannot pin the estimate.
fn local_optimize(
    x1: &[Pixel],
    x2: &[Pixel],
    threshold: f64,
    start: Hypothesis,
    rng: &mut XorShift64Star,
) -> Hypothesis {
    let mut best = iterate_refit(x1, x2, threshold, start);
    let inliers: Vec<usize> = (0..x1.len()).filter(|i| best.mask[*i]).collect();
    let subset = (inliers.len() / 2).min(LO_SUBSET);
    if subset < SAMPLE {
        return best;
    }
    for _ in 0..LO_ROUNDS {
        let picked = rng.sample_indices(inliers.len(), subset);
        let p: Vec<Pixel> = picked.iter().map(|i| x1[inliers[*i]]).collect();
        let q: Vec<Pixel> = picked.iter().map(|i| x2[inliers[*i]]).collect();
        let Ok(f) = refit(&p, &q) else {
            continue;
        };
        let cand = iterate_refit(x1, x2, threshold, Hypothesis::score(f, x1, x2, threshold));
        if cand.better_than(&best) {
            best = cand;
        }
    }
    best
}

/// Seeded RANSAC over eight-point samples. Hypotheses are ranked by the
/// truncated quadratic cost of their Sampson distances; every sample that
/// sets a new best raw cost is locally optimized on its inliers before being
/// compared. The iteration budget adapts to the best inlier ratio (99%
/// confidence, capped at `max_iters`). The returned mask always belongs to
/// the returned matrix.
pub fn ransac_fundamental(
    x1: &[Pixel],
    x2: &[Pixel],
    threshold_px: f64,
    max_iters: usize,
    seed: u64,
) -> Result<FundamentalRansac, GeomError> {
    if x1.len() != x2.len() {
        return Err(GeomError::LengthMismatch(x1.len(), x2.len()));
    }
    if x1.len() < SAMPLE {
        return Err(GeomError::TooFewPoints {
            needed: SAMPLE,
            got: x1.len(),
        });
    }
    if !(threshold_px > 0.0) {
        return Err(GeomError::InvalidParameter(format!("threshold {threshold_px}")));
    }
    let n = x1.len();
    let cap = max_iters.max(1);
    let mut rng = XorShift64Star::new(seed);
    let mut best: Option<Hypothesis> = None;
    let mut best_raw = f64::INFINITY;
    let mut budget = cap;
    let mut iterations = 0;
    let mut s1 = Vec::with_capacity(SAMPLE);
    let mut s2 = Vec::with_capacity(SAMPLE);
    while iterations < budget {
        iterations += 1;
        s1.clear();
        s2.clear();
        for i in rng.sample_indices(n, SAMPLE) {
            s1.push(x1[i]);
            s2.push(x2[i]);
        }
        let Ok(f) = fundamental_8point(&s1, &s2) else {
            continue;
        };
        let raw = Hypothesis::score(f, x1, x2, threshold_px);
        if raw.cost >= best_raw {
            continue;
        }
        best_raw = raw.cost;
        let improved = local_optimize(x1, x2, threshold_px, raw, &mut rng);
        if best.as_ref().is_none_or(|b| improved.better_than(b)) {
            budget = adaptive_iterations(improved.count, n, SAMPLE, cap);
            best = Some(improved);
        }
    }
    let best = best.ok_or_else(|| GeomError::Degenerate("no non-degenerate sample found".into()))?;
    Ok(FundamentalRansac {
        f: best.f,
        inliers: best.mask,
        inlier_count: best.count,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{skew, Intrinsics, Pose};
    use nalgebra::Rotation3;

    struct Scene {
        x1: Vec<Pixel>,
        x2: Vec<Pixel>,
        f_true: Matrix3<f64>,
    }

    fn k() -> Intrinsics {
        Intrinsics::new(420.0, 420.0, 320.0, 256.0).unwrap()
    }

    /// Two cameras looking at a random point cloud; F from the known motion.
    fn scene(seed: u64, n: usize, noise: f64) -> Scene {
        let mut rng = XorShift64Star::new(seed);
        let c1 = Pose::identity();
        let r = Rotation3::from_euler_angles(0.05, -0.2, 0.03).into_inner();
        let t = Vector3::new(-1.0, 0.1, 0.2);
        let c2 = Pose::new(r, t);
        let kk = k();
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        while x1.len() < n {
            let p = Vector3::new(rng.uniform(-4.0, 4.0), rng.uniform(-3.0, 3.0), rng.uniform(4.0, 12.0));
            let (Some(a), Some(b)) = (kk.project(&c1.transform(&p)), kk.project(&c2.transform(&p))) else {
                continue;
            };
            let inside = |x: &Pixel| (0.0..640.0).contains(&x.x) && (0.0..512.0).contains(&x.y);
            if !inside(&a) || !inside(&b) {
                continue;
            }
            x1.push(a + Pixel::new(rng.normal(), rng.normal()) * noise);
            x2.push(b + Pixel::new(rng.normal(), rng.normal()) * noise);
        }
        let kinv = kk.matrix().try_inverse().unwrap();
        let f_true = kinv.transpose() * skew(&t) * r * kinv;
        Scene { x1, x2, f_true }
    }

    /// x'^T F x evaluated longhand.
    fn algebraic(f: &Matrix3<f64>, p: &Pixel, q: &Pixel) -> f64 {
        let p = [p.x, p.y, 1.0];
        let q = [q.x, q.y, 1.0];
        let mut s = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                s += q[r] * f[(r, c)] * p[c];
            }
        }
        s
    }

    #[test]
    fn noiseless_scene_satisfies_epipolar_constraint() {
        let s = scene(1, 40, 0.0);
        let f = fundamental_8point(&s.x1, &s.x2).unwrap();
        for (p, q) in s.x1.iter().zip(&s.x2) {
            assert!(epipolar_error(&f, p, q) < 1e-6);
            assert!(epipolar_error(&s.f_true, p, q) < 1e-6);
        }
        let truth = canonical_scale(&s.f_true);
        assert!((f - truth).norm() < 1e-6, "{f} vs {truth}");
        let sv = f.svd(false, false).singular_values;
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min < 1e-12);
        assert!((f.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pure_x_translation() {
        // Identity intrinsics; camera 2 displaced along x.
        let mut rng = XorShift64Star::new(3);
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        for _ in 0..20 {
            let p = Vector3::new(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(3.0, 8.0));
            let q = p + Vector3::new(1.0, 0.0, 0.0);
            x1.push(Pixel::new(p.x / p.z, p.y / p.z));
            x2.push(Pixel::new(q.x / q.z, q.y / q.z));
        }
        let f = fundamental_8point(&x1, &x2).unwrap();
        let expected = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0) / 2f64.sqrt();
        let err = (f - expected).norm().min((f + expected).norm());
        assert!(err < 1e-9, "{f}");
    }

    #[test]
    fn too_few_and_degenerate_inputs() {
        let s = scene(2, 7, 0.0);
        assert!(matches!(
            fundamental_8point(&s.x1, &s.x2),
            Err(GeomError::TooFewPoints { needed: 8, got: 7 })
        ));
        assert!(matches!(
            ransac_fundamental(&s.x1, &s.x2, 2.0, 100, 0),
            Err(GeomError::TooFewPoints { .. })
        ));
        let same = vec![Pixel::new(1.0, 1.0); 10];
        assert!(matches!(
            fundamental_8point(&same, &same),
            Err(GeomError::Degenerate(_))
        ));
        // Points on one line leave F under-determined.
        let line: Vec<Pixel> = (0..10).map(|i| Pixel::new(i as f64, 2.0 * i as f64)).collect();
        let shifted: Vec<Pixel> = line.iter().map(|p| p + Pixel::new(3.0, 0.0)).collect();
        assert!(matches!(
            fundamental_8point(&line, &shifted),
            Err(GeomError::Degenerate(_))
        ));
    }

    #[test]
    fn sampson_matches_direct_formula_and_is_symmetric() {
        let s = scene(4, 30, 0.0);
        let mut rng = XorShift64Star::new(9);
        for (p, q) in s.x1.iter().zip(&s.x2) {
            let q = q + Pixel::new(rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0));
            let f = s.f_true;
            let e = algebraic(&f, p, &q);
            let fx = f * Vector3::new(p.x, p.y, 1.0);
            let ftx = f.transpose() * Vector3::new(q.x, q.y, 1.0);
            let oracle = (e * e / (fx[0].powi(2) + fx[1].powi(2) + ftx[0].powi(2) + ftx[1].powi(2))).sqrt();
            let got = epipolar_error(&f, p, &q);
            assert!((got - oracle).abs() <= 1e-12 * oracle.max(1.0));
            let sym = epipolar_error(&f.transpose(), &q, p);
            assert!((got - sym).abs() <= 1e-12 * got.max(1.0));
        }
        for (p, q) in s.x1.iter().zip(&s.x2) {
            assert!(epipolar_error(&s.f_true, p, q) < 1e-10);
        }
    }

    #[test]
    fn ransac_all_inliers() {
        let s = scene(5, 100, 0.0);
        let r = ransac_fundamental(&s.x1, &s.x2, 2.0, 1000, 1).unwrap();
        assert_eq!(r.inlier_count, 100);
        assert!(r.inliers.iter().all(|m| *m));
    }

    /// Uniform outliers, rejecting any that land within 10 px of the true
    /// epipolar geometry or that some other F can absorb while keeping every
    /// inlier within 3 px (those are geometrically indistinguishable).
    fn with_outliers(
        seed: u64,
        inliers: usize,
        outliers: usize,
        noise: f64,
    ) -> (Vec<Pixel>, Vec<Pixel>, Vec<bool>, Matrix3<f64>) {
        let s = scene(seed, inliers, noise);
        let mut rng = XorShift64Star::new(seed ^ 0xABCD);
        let (s_x1, s_x2) = (s.x1.clone(), s.x2.clone());
        let mut x1 = s.x1;
        let mut x2 = s.x2;
        let mut truth = vec![true; inliers];
        let mut added = 0;
        while added < outliers {
            let p = Pixel::new(rng.uniform(0.0, 640.0), rng.uniform(0.0, 512.0));
            let q = Pixel::new(rng.uniform(0.0, 640.0), rng.uniform(0.0, 512.0));
            if epipolar_error(&s.f_true, &p, &q) < 10.0 {
                continue;
            }
            let mut a = s_x1.clone();
            let mut b = s_x2.clone();
            a.push(p);
            b.push(q);
            if let Ok(f) = refit(&a, &b) {
                if a.iter().zip(&b).all(|(u, v)| epipolar_error(&f, u, v) < 3.0) {
                    continue;
                }
            }
            // Interleave so outliers are not a contiguous block.
            let at = rng.below(x1.len() + 1);
            x1.insert(at, p);
            x2.insert(at, q);
            truth.insert(at, false);
            added += 1;
        }
        (x1, x2, truth, s.f_true)
    }

    #[test]
    fn ransac_rejects_planted_outliers() {
        for seed in 0..10 {
            let (x1, x2, truth, _) = with_outliers(seed, 70, 30, 0.0);
            let r = ransac_fundamental(&x1, &x2, 2.0, 2000, seed).unwrap();
            let recovered = r.inliers.iter().zip(&truth).filter(|(m, t)| **m && **t).count();
            let admitted = r.inliers.iter().zip(&truth).filter(|(m, t)| **m && !**t).count();
            assert!(recovered as f64 >= 0.95 * 70.0, "seed {seed}: {recovered}");
            assert_eq!(admitted, 0, "seed {seed}");
            let again = ransac_fundamental(&x1, &x2, 2.0, 2000, seed).unwrap();
            assert_eq!(again, r);
        }
    }

    #[test]
    fn ransac_with_pixel_noise() {
        for seed in 0..20 {
            let (x1, x2, truth, _) = with_outliers(seed, 70, 30, 0.5);
            let r = ransac_fundamental(&x1, &x2, 2.0, 2000, seed).unwrap();
            let recovered = r.inliers.iter().zip(&truth).filter(|(m, t)| **m && **t).count();
            let admitted = r.inliers.iter().zip(&truth).filter(|(m, t)| **m && !**t).count();
            assert!(recovered as f64 >= 0.95 * 70.0, "seed {seed}: {recovered}");
            assert_eq!(admitted, 0, "seed {seed}");
            for ((p, q), m) in x1.iter().zip(&x2).zip(&r.inliers) {
                if *m {
                    assert!(epipolar_error(&r.f, p, q) <= 2.0);
                }
            }
        }
    }
}
