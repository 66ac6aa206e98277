//! Synthetic corridor world with diurnal appearance drift.
//!
//! Landmarks line both walls of a circular corridor. Each carries a day
//! appearance and an independently drawn night appearance (float mode) or a
//! bit string with per-bit diurnal flip thresholds (binary mode). An
//! observation at time-of-day fraction `tau` blends the two with
//! `lambda(tau) = sin^2(pi tau)`.
//!
//! World frame: x east, y north, z up. Cameras look along +z with x right and
//! y down; poses are world-to-camera.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::descriptor::{Descriptor, DescriptorError, DescriptorKind, DescriptorSet, Keypoint, Signature};
use crate::geom::{Intrinsics, Pixel, Pose};
use crate::rng::{derive_seed, XorShift64Star};

pub const FRAME_WIDTH: f64 = 640.0;
pub const FRAME_HEIGHT: f64 = 512.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidParameter(msg.into())
}

/// Diurnal blend weight: 0 at `tau = 0` and `tau = 1`, 1 at `tau = 0.5`.
pub fn lambda(tau: f64) -> f64 {
    let s = (PI * tau).sin();
    s * s
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldParams {
    pub loop_radius_m: f64,
    /// Distance from the corridor centerline to each wall.
    pub half_width_m: f64,
    /// Landmarks per meter of centerline, both walls together.
    pub density_per_m: f64,
    pub min_height_m: f64,
    pub max_height_m: f64,
    /// Landmarks farther than this from the camera are not detected.
    pub visibility_range_m: f64,
    pub float_dim: usize,
    pub binary_bytes: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            loop_radius_m: 40.0,
            half_width_m: 6.0,
            density_per_m: 16.0,
            min_height_m: 0.2,
            max_height_m: 5.0,
            visibility_range_m: 25.0,
            float_dim: 256,
            binary_bytes: 32,
        }
    }
}

impl WorldParams {
    pub fn corridor_length_m(&self) -> f64 {
        2.0 * PI * self.loop_radius_m
    }

    pub fn landmark_count(&self) -> usize {
        (self.density_per_m * self.corridor_length_m()).floor() as usize
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.loop_radius_m > 0.0 && self.half_width_m >= 0.0 && self.half_width_m < self.loop_radius_m) {
            return Err(invalid("corridor needs 0 <= half width < loop radius"));
        }
        if !(self.density_per_m >= 0.0 && self.density_per_m.is_finite()) {
            return Err(invalid("density must be finite and non-negative"));
        }
        if !(self.min_height_m <= self.max_height_m) || !(self.visibility_range_m > 0.0) {
            return Err(invalid("height range or visibility range"));
        }
        if self.float_dim == 0 || self.binary_bytes == 0 {
            return Err(invalid("descriptor sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: u32,
    pub position: Vector3<f64>,
    /// Unit-norm day appearance.
    pub base: Vec<f64>,
    /// Unit-norm night appearance, drawn independently of `base`.
    pub night: Vec<f64>,
    pub bits: Vec<u8>,
    /// Per-bit uniforms: bit `b` is subject to diurnal flipping when
    /// `mask_u[b] < flip_mask_fraction`, and is flipped at `tau` when
    /// `flip_u[b] < lambda(tau) / 2`.
    pub mask_u: Vec<f32>,
    pub flip_u: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub params: WorldParams,
    pub landmarks: Vec<Landmark>,
}

fn unit_gaussian(rng: &mut XorShift64Star, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Places `params.landmark_count()` landmarks at uniformly random arc
/// positions, alternating between the inner and outer wall.
pub fn generate_world(params: &WorldParams, seed: u64) -> Result<World, SimError> {
    params.validate()?;
    let n = params.landmark_count();
    let bits = params.binary_bytes * 8;
    let landmarks = (0..n)
        .map(|i| {
            let mut rng = XorShift64Star::new(derive_seed(seed, i as u64));
            let theta = rng.uniform(0.0, 2.0 * PI);
            let wall = if i % 2 == 0 { -1.0 } else { 1.0 };
            let r = params.loop_radius_m + wall * params.half_width_m + rng.uniform(-0.5, 0.5);
            let z = rng.uniform(params.min_height_m, params.max_height_m);
            Landmark {
                id: i as u32,
                position: Vector3::new(r * theta.cos(), r * theta.sin(), z),
                base: unit_gaussian(&mut rng, params.float_dim),
                night: unit_gaussian(&mut rng, params.float_dim),
                bits: (0..params.binary_bytes).map(|_| (rng.next_u64() >> 56) as u8).collect(),
                mask_u: (0..bits).map(|_| rng.next_f64() as f32).collect(),
                flip_u: (0..bits).map(|_| rng.next_f64() as f32).collect(),
            }
        })
        .collect();
    Ok(World {
        params: params.clone(),
        landmarks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftModel {
    /// Float mode: norm of the per-observation appearance noise relative to
    /// the unit appearance. Binary mode: flip probability of unmasked bits.
    pub sigma_obs: f64,
    pub pixel_noise: f64,
    /// Binary mode: fraction of bits subject to diurnal flipping.
    pub flip_mask_fraction: f64,
    /// Float mode: share of the day appearance retained in the appearance a
    /// landmark drifts toward at night (0 drifts to the raw night vector).
    pub float_invariance: f64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self {
            sigma_obs: 0.05,
            pixel_noise: 0.5,
            flip_mask_fraction: 0.7,
            float_invariance: 0.7,
        }
    }
}

impl DriftModel {
    pub fn noiseless() -> Self {
        Self {
            sigma_obs: 0.0,
            pixel_noise: 0.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.sigma_obs >= 0.0
            && self.sigma_obs.is_finite()
            && self.pixel_noise >= 0.0
            && self.pixel_noise.is_finite())
        {
            return Err(invalid("noise levels must be finite and non-negative"));
        }
        if !unit(self.flip_mask_fraction) || !unit(self.float_invariance) {
            return Err(invalid("flip mask fraction and float invariance must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Float appearance of a landmark at `tau` before observation noise.
    pub fn float_appearance(&self, lm: &Landmark, tau: f64) -> Vec<f64> {
        let l = lambda(tau);
        let rho = self.float_invariance;
        lm.base
            .iter()
            .zip(&lm.night)
            .map(|(b, n)| (1.0 - l) * b + l * (rho * b + (1.0 - rho) * n))
            .collect()
    }

    /// Bit string of a landmark at `tau` before observation noise.
    pub fn binary_appearance(&self, lm: &Landmark, tau: f64) -> Vec<u8> {
        let half = (lambda(tau) / 2.0) as f32;
        let frac = self.flip_mask_fraction as f32;
        let mut out = lm.bits.clone();
        for b in 0..out.len() * 8 {
            if lm.mask_u[b] < frac && lm.flip_u[b] < half {
                out[b / 8] ^= 1 << (b % 8);
            }
        }
        out
    }
}

/// Ground truth of one emitted frame, index-aligned with its descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    pub pose: Pose,
    pub tau: f64,
    pub landmark_ids: Vec<u32>,
    /// Noise-free projections.
    pub projections: Vec<Pixel>,
}

/// Landmarks visible from `pose`: in front of the camera, within the
/// visibility range and projecting inside the 640x512 frame. Returned in id
/// order with their noise-free projections.
pub fn visible_landmarks(world: &World, pose: &Pose, k: &Intrinsics) -> Vec<(usize, Pixel)> {
    let range2 = world.params.visibility_range_m * world.params.visibility_range_m;
    world
        .landmarks
        .iter()
        .enumerate()
        .filter_map(|(i, lm)| {
            let pc = pose.transform(&lm.position);
            if pc.norm_squared() > range2 {
                return None;
            }
            let px = k.project(&pc)?;
            let inside = (0.0..FRAME_WIDTH).contains(&px.x) && (0.0..FRAME_HEIGHT).contains(&px.y);
            inside.then_some((i, px))
        })
        .collect()
}

/// Simulated detection of every visible landmark at time-of-day `tau`.
pub fn observe(
    world: &World,
    pose: &Pose,
    tau: f64,
    k: &Intrinsics,
    drift: &DriftModel,
    kind: DescriptorKind,
    seed: u64,
) -> Result<(DescriptorSet, FrameTruth), SimError> {
    drift.validate()?;
    let mut rng = XorShift64Star::new(seed);
    let visible = visible_landmarks(world, pose, k);
    let signature = match kind {
        DescriptorKind::Float => Signature::float(world.params.float_dim)?,
        DescriptorKind::Binary => Signature::binary(world.params.binary_bytes)?,
    };
    let dim = world.params.float_dim as f64;
    let mut descriptors = Vec::with_capacity(visible.len());
    let mut keypoints = Vec::with_capacity(visible.len());
    let mut ids = Vec::with_capacity(visible.len());
    let mut projections = Vec::with_capacity(visible.len());
    for (i, px) in visible {
        let lm = &world.landmarks[i];
        let kp = Keypoint::new(
            (px.x + drift.pixel_noise * rng.normal()) as f32,
            (px.y + drift.pixel_noise * rng.normal()) as f32,
        );
        let d = match kind {
            DescriptorKind::Float => {
                let mut v = drift.float_appearance(lm, tau);
                if drift.sigma_obs > 0.0 {
                    let s = drift.sigma_obs / dim.sqrt();
                    v.iter_mut().for_each(|x| *x += s * rng.normal());
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                Descriptor::Float(v.iter().map(|x| (x / n) as f32).collect())
            }
            DescriptorKind::Binary => {
                let mut bits = drift.binary_appearance(lm, tau);
                if drift.sigma_obs > 0.0 {
                    for b in 0..bits.len() * 8 {
                        if rng.next_f64() < drift.sigma_obs {
                            bits[b / 8] ^= 1 << (b % 8);
                        }
                    }
                }
                Descriptor::Binary(bits)
            }
        };
        descriptors.push(d);
        keypoints.push(kp);
        ids.push(lm.id);
        projections.push(px);
    }
    let set = DescriptorSet::new(signature, descriptors)?
        .with_keypoints(keypoints)?
        .with_landmark_ids(ids.clone())?;
    Ok((
        set,
        FrameTruth {
            pose: *pose,
            tau,
            landmark_ids: ids,
            projections,
        },
    ))
}

/// Index pairs of the two frames that observe the same landmark, ordered by
/// the index in `a`.
pub fn truth_matches(a: &FrameTruth, b: &FrameTruth) -> Vec<(u32, u32)> {
    let in_b: HashMap<u32, u32> = b
        .landmark_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (*id, j as u32))
        .collect();
    a.landmark_ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| in_b.get(id).map(|j| (i as u32, *j)))
        .collect()
}

/// Camera on the corridor at arc length `s` (counter-clockwise from +x),
/// looking along the corridor.
pub fn corridor_pose(world: &WorldParams, s: f64, lateral_m: f64, height_m: f64, yaw: f64) -> Pose {
    let theta = s / world.loop_radius_m;
    let r = world.loop_radius_m + lateral_m;
    let center = Vector3::new(r * theta.cos(), r * theta.sin(), height_m);
    let heading = theta + PI / 2.0 + yaw;
    let forward = Vector3::new(heading.cos(), heading.sin(), 0.0);
    let up = Vector3::z();
    let right = forward.cross(&up);
    let cam_to_world = Matrix3::from_columns(&[right, -up, forward]);
    Pose::from_center(cam_to_world, center)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassSpec {
    pub name: String,
    pub tau: f64,
    /// Arc length of the first frame.
    pub start_m: f64,
    pub spacing_m: f64,
    pub frames: usize,
    pub lateral_m: f64,
    /// Per-frame yaw jitter standard deviation, radians.
    pub yaw_jitter: f64,
}

impl PassSpec {
    pub fn new(name: &str, tau: f64, start_m: f64, spacing_m: f64, frames: usize) -> Self {
        Self {
            name: name.to_string(),
            tau,
            start_m,
            spacing_m,
            frames,
            lateral_m: 0.0,
            yaw_jitter: 0.0,
        }
    }
}

pub const CAMERA_HEIGHT_M: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub world: WorldParams,
    pub drift: DriftModel,
    pub intrinsics: Intrinsics,
    pub kind: DescriptorKind,
    pub passes: Vec<PassSpec>,
}

/// One rendered frame.
#[derive(Debug, Clone)]
pub struct SimFrame {
    pub set: DescriptorSet,
    pub truth: FrameTruth,
    /// Arc length along the corridor.
    pub arc_m: f64,
}

impl Scenario {
    pub fn default_intrinsics() -> Intrinsics {
        // 75 degree horizontal field of view over 640 px.
        let fx = 320.0 / (75f64.to_radians() / 2.0).tan();
        Intrinsics {
            fx,
            fy: fx,
            cx: 320.0,
            cy: 256.0,
        }
    }

    /// Two day and two night laps of the corridor, one frame every 2 m. The
    /// second lap of each condition is offset by half a spacing and 0.3 m
    /// laterally so no frame repeats exactly.
    pub fn loop_pair(seed: u64, kind: DescriptorKind) -> Self {
        let world = WorldParams::default();
        let spacing = 2.0;
        let frames = (world.corridor_length_m() / spacing).floor() as usize;
        let lap = |name: &str, tau: f64, second: bool| PassSpec {
            name: name.to_string(),
            tau,
            start_m: if second { spacing / 2.0 } else { 0.0 },
            spacing_m: spacing,
            frames,
            lateral_m: if second { 0.3 } else { 0.0 },
            yaw_jitter: 0.02,
        };
        Self {
            seed,
            world,
            drift: DriftModel::default(),
            intrinsics: Self::default_intrinsics(),
            kind,
            passes: vec![
                lap("day1", 0.0, false),
                lap("day2", 0.02, true),
                lap("night1", 0.5, false),
                lap("night2", 0.48, true),
            ],
        }
    }

    pub fn world(&self) -> Result<World, SimError> {
        generate_world(&self.world, derive_seed(self.seed, 0))
    }

    pub fn pass_seed(&self, pass: usize) -> u64 {
        derive_seed(self.seed, 1000 + pass as u64)
    }

    pub fn pass_poses(&self, pass: usize) -> Vec<(f64, Pose)> {
        let spec = &self.passes[pass];
        let mut rng = XorShift64Star::new(self.pass_seed(pass) ^ 0x9E37_79B9);
        (0..spec.frames)
            .map(|i| {
                let s = spec.start_m + i as f64 * spec.spacing_m;
                let yaw = spec.yaw_jitter * rng.normal();
                (s, corridor_pose(&self.world, s, spec.lateral_m, CAMERA_HEIGHT_M, yaw))
            })
            .collect()
    }

    /// Renders a pass. Frame `i` uses seed `pass_seed ^ i`.
    pub fn render_pass(&self, world: &World, pass: usize) -> Result<Vec<SimFrame>, SimError> {
        let spec = &self.passes[pass];
        let seed = self.pass_seed(pass);
        self.pass_poses(pass)
            .into_iter()
            .enumerate()
            .map(|(i, (s, pose))| {
                let (set, truth) = observe(
                    world,
                    &pose,
                    spec.tau,
                    &self.intrinsics,
                    &self.drift,
                    self.kind,
                    seed ^ i as u64,
                )?;
                Ok(SimFrame { set, truth, arc_m: s })
            })
            .collect()
    }

    /// Plain-text `key=value` manifest capturing every parameter.
    pub fn to_manifest(&self) -> String {
        let w = &self.world;
        let d = &self.drift;
        let k = &self.intrinsics;
        let mut s = String::new();
        let kind = match self.kind {
            DescriptorKind::Float => "float",
            DescriptorKind::Binary => "binary",
        };
        for (key, value) in [
            ("seed", self.seed.to_string()),
            ("kind", kind.to_string()),
            ("world.loop_radius_m", w.loop_radius_m.to_string()),
            ("world.half_width_m", w.half_width_m.to_string()),
            ("world.density_per_m", w.density_per_m.to_string()),
            ("world.min_height_m", w.min_height_m.to_string()),
            ("world.max_height_m", w.max_height_m.to_string()),
            ("world.visibility_range_m", w.visibility_range_m.to_string()),
            ("world.float_dim", w.float_dim.to_string()),
            ("world.binary_bytes", w.binary_bytes.to_string()),
            ("drift.sigma_obs", d.sigma_obs.to_string()),
            ("drift.pixel_noise", d.pixel_noise.to_string()),
            ("drift.flip_mask_fraction", d.flip_mask_fraction.to_string()),
            ("drift.float_invariance", d.float_invariance.to_string()),
            ("camera.fx", k.fx.to_string()),
            ("camera.fy", k.fy.to_string()),
            ("camera.cx", k.cx.to_string()),
            ("camera.cy", k.cy.to_string()),
        ] {
            let _ = writeln!(s, "{key}={value}");
        }
        for p in &self.passes {
            let _ = writeln!(
                s,
                "pass={},{},{},{},{},{},{}",
                p.name, p.tau, p.start_m, p.spacing_m, p.frames, p.lateral_m, p.yaw_jitter
            );
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self, SimError> {
        let mut sc = Scenario::loop_pair(0, DescriptorKind::Float);
        sc.passes.clear();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| SimError::Manifest { line: n + 1, reason };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            let num = |v: &str| v.trim().parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            let int = |v: &str| v.trim().parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            match key.trim() {
                "seed" => sc.seed = value.trim().parse().map_err(|e| err(format!("seed: {e}")))?,
                "kind" => {
                    sc.kind = match value.trim() {
                        "float" => DescriptorKind::Float,
                        "binary" => DescriptorKind::Binary,
                        other => return Err(err(format!("unknown kind {other:?}"))),
                    }
                }
                "world.loop_radius_m" => sc.world.loop_radius_m = num(value)?,
                "world.half_width_m" => sc.world.half_width_m = num(value)?,
                "world.density_per_m" => sc.world.density_per_m = num(value)?,
                "world.min_height_m" => sc.world.min_height_m = num(value)?,
                "world.max_height_m" => sc.world.max_height_m = num(value)?,
                "world.visibility_range_m" => sc.world.visibility_range_m = num(value)?,
                "world.float_dim" => sc.world.float_dim = int(value)?,
                "world.binary_bytes" => sc.world.binary_bytes = int(value)?,
                "drift.sigma_obs" => sc.drift.sigma_obs = num(value)?,
                "drift.pixel_noise" => sc.drift.pixel_noise = num(value)?,
                "drift.flip_mask_fraction" => sc.drift.flip_mask_fraction = num(value)?,
                "drift.float_invariance" => sc.drift.float_invariance = num(value)?,
                "camera.fx" => sc.intrinsics.fx = num(value)?,
                "camera.fy" => sc.intrinsics.fy = num(value)?,
                "camera.cx" => sc.intrinsics.cx = num(value)?,
                "camera.cy" => sc.intrinsics.cy = num(value)?,
                "pass" => {
                    let f: Vec<&str> = value.split(',').collect();
                    if f.len() != 7 {
                        return Err(err(
                            "pass needs name,tau,start_m,spacing_m,frames,lateral_m,yaw_jitter".into()
                        ));
                    }
                    sc.passes.push(PassSpec {
                        name: f[0].trim().to_string(),
                        tau: num(f[1])?,
                        start_m: num(f[2])?,
                        spacing_m: num(f[3])?,
                        frames: int(f[4])?,
                        lateral_m: num(f[5])?,
                        yaw_jitter: num(f[6])?,
                    });
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        sc.world.validate()?;
        sc.drift.validate()?;
        Intrinsics::new(sc.intrinsics.fx, sc.intrinsics.fy, sc.intrinsics.cx, sc.intrinsics.cy)
            .map_err(|e| invalid(e.to_string()))?;
        Ok(sc)
    }
}

/// Frames of a static camera at every `tau` in `taus`. Frame `i` uses seed
/// `seed ^ i`.
pub fn timelapse(
    world: &World,
    pose: &Pose,
    taus: &[f64],
    k: &Intrinsics,
    drift: &DriftModel,
    kind: DescriptorKind,
    seed: u64,
) -> Result<Vec<(DescriptorSet, FrameTruth)>, SimError> {
    taus.iter()
        .enumerate()
        .map(|(i, &tau)| observe(world, pose, tau, k, drift, kind, seed ^ i as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world(seed: u64) -> World {
        let p = WorldParams {
            loop_radius_m: 20.0,
            density_per_m: 4.0,
            float_dim: 32,
            ..WorldParams::default()
        };
        generate_world(&p, seed).unwrap()
    }

    fn k() -> Intrinsics {
        Scenario::default_intrinsics()
    }

    #[test]
    fn lambda_endpoints_and_symmetry() {
        assert_eq!(lambda(0.0), 0.0);
        assert!((lambda(0.5) - 1.0).abs() < 1e-15);
        assert!(lambda(1.0) < 1e-30);
        for i in 0..=50 {
            let t = i as f64 / 100.0;
            assert!((lambda(t) - lambda(1.0 - t)).abs() < 1e-12);
        }
    }

    #[test]
    fn world_is_deterministic_and_sized() {
        let a = small_world(3);
        let b = small_world(3);
        assert_eq!(a, b);
        let expected = (4.0 * 2.0 * PI * 20.0f64).floor() as usize;
        assert_eq!(a.landmarks.len(), expected);
        for lm in &a.landmarks {
            let n: f64 = lm.base.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
            assert!(lm.position.iter().all(|x| x.is_finite()));
        }
        let empty = generate_world(
            &WorldParams {
                density_per_m: 0.0,
                ..WorldParams::default()
            },
            1,
        )
        .unwrap();
        assert!(empty.landmarks.is_empty());
    }

    #[test]
    fn noiseless_day_observation_equals_base() {
        let w = small_world(4);
        let pose = corridor_pose(&w.params, 5.0, 0.0, CAMERA_HEIGHT_M, 0.0);
        let (set, truth) = observe(&w, &pose, 0.0, &k(), &DriftModel::noiseless(), DescriptorKind::Float, 9).unwrap();
        assert!(!set.is_empty());
        for (d, id) in set.descriptors().iter().zip(&truth.landmark_ids) {
            let base: Vec<f32> = w.landmarks[*id as usize].base.iter().map(|x| *x as f32).collect();
            assert_eq!(d.as_float().unwrap(), base.as_slice());
        }
        for (kp, px) in set.keypoints().unwrap().iter().zip(&truth.projections) {
            assert_eq!((kp.x, kp.y), (px.x as f32, px.y as f32));
        }
        let (bin, _) = observe(
            &w,
            &pose,
            0.0,
            &k(),
            &DriftModel::noiseless(),
            DescriptorKind::Binary,
            9,
        )
        .unwrap();
        for (d, id) in bin.descriptors().iter().zip(&truth.landmark_ids) {
            assert_eq!(d.as_binary().unwrap(), w.landmarks[*id as usize].bits.as_slice());
        }
    }

    #[test]
    fn observation_is_deterministic() {
        let w = small_world(5);
        let pose = corridor_pose(&w.params, 30.0, 0.2, CAMERA_HEIGHT_M, 0.1);
        let d = DriftModel::default();
        let a = observe(&w, &pose, 0.3, &k(), &d, DescriptorKind::Float, 11).unwrap();
        let b = observe(&w, &pose, 0.3, &k(), &d, DescriptorKind::Float, 11).unwrap();
        assert!(a.0.bit_eq(&b.0));
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn behind_camera_and_out_of_frame_are_excluded() {
        let mut w = small_world(6);
        w.landmarks.clear();
        let pose = Pose::identity();
        let mk = |id: u32, p: Vector3<f64>| Landmark {
            id,
            position: p,
            base: vec![1.0; 1],
            night: vec![1.0; 1],
            bits: vec![0; 1],
            mask_u: vec![0.0; 8],
            flip_u: vec![0.0; 8],
        };
        w.params.float_dim = 1;
        w.params.binary_bytes = 1;
        w.landmarks.push(mk(0, Vector3::new(0.0, 0.0, 5.0)));
        w.landmarks.push(mk(1, Vector3::new(0.0, 0.0, -5.0)));
        w.landmarks.push(mk(2, Vector3::new(50.0, 0.0, 5.0)));
        w.landmarks.push(mk(3, Vector3::new(0.0, 0.0, 500.0)));
        let (set, truth) = observe(&w, &pose, 0.0, &k(), &DriftModel::noiseless(), DescriptorKind::Float, 0).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(truth.landmark_ids, vec![0]);
        // On the optical axis: exactly the principal point.
        assert_eq!(truth.projections[0], Pixel::new(k().cx, k().cy));
    }

    #[test]
    fn night_correlation_without_invariance() {
        let p = WorldParams {
            density_per_m: 1500.0 / (2.0 * PI * 40.0),
            ..WorldParams::default()
        };
        let w = generate_world(&p, 7).unwrap();
        assert!(w.landmarks.len() >= 1000);
        let d = DriftModel {
            float_invariance: 0.0,
            ..DriftModel::noiseless()
        };
        let mut corr = 0.0;
        let mut bn = 0.0;
        for lm in &w.landmarks {
            let v = d.float_appearance(lm, 0.5);
            corr += v.iter().zip(&lm.base).map(|(a, b)| a * b).sum::<f64>();
            bn += lm.night.iter().zip(&lm.base).map(|(a, b)| a * b).sum::<f64>();
        }
        let n = w.landmarks.len() as f64;
        assert!((corr / n - bn / n).abs() < 0.05);
        assert!((corr / n).abs() < 0.05);
    }

    #[test]
    fn drift_is_symmetric_in_tau() {
        let w = small_world(8);
        let d = DriftModel::default();
        for lm in w.landmarks.iter().take(20) {
            for t in [0.1, 0.2, 0.37] {
                let a = d.float_appearance(lm, t);
                let b = d.float_appearance(lm, 1.0 - t);
                assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
                assert_eq!(d.binary_appearance(lm, t), d.binary_appearance(lm, 1.0 - t));
            }
        }
    }

    #[test]
    fn binary_flips_only_masked_bits() {
        let w = small_world(9);
        let d = DriftModel {
            flip_mask_fraction: 0.5,
            ..DriftModel::noiseless()
        };
        let mut flipped = 0usize;
        let mut masked = 0usize;
        for lm in &w.landmarks {
            let night = d.binary_appearance(lm, 0.5);
            for b in 0..lm.bits.len() * 8 {
                let changed = (night[b / 8] ^ lm.bits[b / 8]) >> (b % 8) & 1 == 1;
                if lm.mask_u[b] >= 0.5 {
                    assert!(!changed);
                } else {
                    masked += 1;
                    flipped += changed as usize;
                }
            }
        }
        // lambda(0.5) / 2 of the masked bits flip.
        let rate = flipped as f64 / masked as f64;
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
    }

    #[test]
    fn truth_matches_by_landmark_id() {
        let mk = |ids: Vec<u32>| FrameTruth {
            pose: Pose::identity(),
            tau: 0.0,
            projections: vec![Pixel::zeros(); ids.len()],
            landmark_ids: ids,
        };
        let a = mk(vec![1, 4, 7, 9, 12, 20, 33]);
        assert_eq!(truth_matches(&a, &a), (0..7).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(truth_matches(&a, &mk(vec![2, 3, 5])).is_empty());
        let b = mk(vec![0, 4, 9, 12, 13, 20, 33, 40]);
        assert_eq!(truth_matches(&a, &b), vec![(1, 1), (3, 2), (4, 3), (5, 5), (6, 6)]);
    }

    #[test]
    fn corridor_pose_looks_along_the_corridor() {
        let p = WorldParams::default();
        let pose = corridor_pose(&p, 0.0, 0.0, 1.5, 0.0);
        assert!((pose.center() - Vector3::new(40.0, 0.0, 1.5)).norm() < 1e-12);
        assert!(pose.is_valid_rotation(1e-12));
        // A point ahead along +y projects near the principal point.
        let ahead = pose.transform(&Vector3::new(40.0, 10.0, 1.5));
        assert!(ahead.z > 9.9 && ahead.x.abs() < 1e-9 && ahead.y.abs() < 1e-9);
        let up = pose.transform(&Vector3::new(40.0, 10.0, 3.0));
        assert!(up.y < 0.0);
    }

    #[test]
    fn manifest_round_trip() {
        let sc = Scenario::loop_pair(42, DescriptorKind::Binary);
        let text = sc.to_manifest();
        let back = Scenario::from_manifest(&text).unwrap();
        assert_eq!(back, sc);
        assert!(matches!(
            Scenario::from_manifest("seed=1\nbogus=2\n"),
            Err(SimError::Manifest { line: 2, .. })
        ));
    }

    #[test]
    fn scenario_frames_see_enough_landmarks() {
        let sc = Scenario::loop_pair(1, DescriptorKind::Float);
        let w = sc.world().unwrap();
        let frames = sc.render_pass(&w, 0).unwrap();
        assert_eq!(frames.len(), sc.passes[0].frames);
        let counts: Vec<usize> = frames.iter().map(|f| f.set.len()).collect();
        let min = *counts.iter().min().unwrap();
        assert!(min >= 60, "{min}");
    }
}
