//! Keyframe maps with 3D landmarks, their `.map` (MAP1) file format, and
//! single-frame relocalization against them.
//!
//! MAP1 layout, little-endian:
//!
//! ```text
//! "MAP1" | keyframe count u32
//! | per keyframe: pose (12 x f32: world-to-camera rotation row-major, then
//! |               translation), DSC1 blob with keypoints, per-feature
//! |               landmark index u32 (0xFFFFFFFF: none)
//! | landmark count u32 | count x 3 f32 position
//! | embedded IDB1 database without descriptor blobs
//! ```
//!
//! Keyframe `i` is database entry `i`; its descriptors are attached from the
//! keyframe record on load.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3, Vector3};
use thiserror::Error;

use crate::descriptor::{DescriptorError, DescriptorSet};
use crate::format::{count_u32, put_f32, put_u32, read_file, write_file, ByteReader, FormatError};
use crate::geom::{
    local_alignment_error, orthonormalize, ransac_pnp, GeomError, Intrinsics, Pixel, Pose, DEFAULT_ALIGN_WINDOW,
    DEFAULT_RANSAC_ITERS,
};
use crate::index::{transform, ImageDatabase, IndexError};
use crate::io::{decode_descriptor_set, encode_descriptor_set};
use crate::loopdet::{match_descriptors, LoopDetector, LoopError, LoopMode, LoopParams, LoopStatus};
use crate::rng::{derive_seed, XorShift64Star};
use crate::simgen::{SimFrame, World};
use crate::vocab::Vocabulary;

pub const MAP_MAGIC: &[u8; 4] = b"MAP1";
pub const NO_LANDMARK: u32 = u32::MAX;
/// Maximum distance between a relocalized camera and its keyframe.
pub const DEFAULT_GATE_M: f64 = 10.0;
pub const DEFAULT_PNP_THRESHOLD_PX: f64 = 3.0;
pub const DEFAULT_RELOC_MIN_INLIERS: usize = 15;
/// Night queries score lower against a day map than against each other, so
/// relocalization normalizes with a looser threshold than loop detection.
pub const DEFAULT_RELOC_ALPHA: f64 = 0.15;
pub const DEFAULT_RELOC_TEMPORAL_K: usize = 1;
const PNP_MIN_CORRESPONDENCES: usize = 6;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("invalid map: {0}")]
    Invalid(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub pose: Pose,
    /// Must carry keypoints.
    pub set: Arc<DescriptorSet>,
    /// Landmark table index per feature, or [`NO_LANDMARK`].
    pub landmarks: Vec<u32>,
}

#[derive(Debug)]
pub struct MapFile {
    keyframes: Vec<Keyframe>,
    landmarks: Vec<Vector3<f64>>,
    db: ImageDatabase,
}

impl MapFile {
    /// Indexes every keyframe in a fresh database over `vocab`.
    pub fn build(
        vocab: &Vocabulary,
        keyframes: Vec<Keyframe>,
        landmarks: Vec<Vector3<f64>>,
        di_levels: usize,
    ) -> Result<Self, MapError> {
        check_keyframes(&keyframes, landmarks.len())?;
        let mut db = ImageDatabase::new(vocab);
        for kf in &keyframes {
            let (bow, fv) = transform(vocab, &kf.set, di_levels)?;
            let id = db.add(bow, fv, None)?;
            db.attach_descriptors(id, kf.set.clone())?;
        }
        Ok(Self {
            keyframes,
            landmarks,
            db,
        })
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn landmarks(&self) -> &[Vector3<f64>] {
        &self.landmarks
    }

    pub fn database(&self) -> &ImageDatabase {
        &self.db
    }

    pub fn keyframe_centers(&self) -> BTreeMap<u32, Vector3<f64>> {
        self.keyframes
            .iter()
            .enumerate()
            .map(|(i, kf)| (i as u32, kf.pose.center()))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, MapError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAP_MAGIC);
        put_u32(&mut out, count_u32(self.keyframes.len(), "keyframe")?);
        for kf in &self.keyframes {
            for r in 0..3 {
                for c in 0..3 {
                    put_f32(&mut out, kf.pose.rotation[(r, c)] as f32);
                }
            }
            for i in 0..3 {
                put_f32(&mut out, kf.pose.translation[i] as f32);
            }
            encode_descriptor_set(&kf.set, &mut out)?;
            kf.landmarks.iter().for_each(|l| put_u32(&mut out, *l));
        }
        put_u32(&mut out, count_u32(self.landmarks.len(), "landmark")?);
        for p in &self.landmarks {
            for i in 0..3 {
                put_f32(&mut out, p[i] as f32);
            }
        }
        out.extend_from_slice(&self.db.to_bytes_without_descriptors()?);
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MapError> {
        Ok(write_file(path.as_ref(), &self.to_bytes()?)?)
    }

    pub fn from_bytes(bytes: &[u8], vocab: &Vocabulary) -> Result<Self, MapError> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAP_MAGIC)?;
        let n = r.u32()?;
        let mut keyframes = Vec::new();
        for _ in 0..n {
            let at = r.pos();
            let mut v = [0f64; 12];
            for x in v.iter_mut() {
                *x = r.f32()? as f64;
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(FormatError::invalid(at, "non-finite keyframe pose").into());
            }
            let rotation = orthonormalize(&Matrix3::from_row_slice(&v[..9]));
            let pose = Pose::new(rotation, Vector3::new(v[9], v[10], v[11]));
            let set = decode_descriptor_set(&mut r)?;
            let landmarks = (0..set.len()).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            keyframes.push(Keyframe {
                pose,
                set: Arc::new(set),
                landmarks,
            });
        }
        let n = r.u32()?;
        let mut landmarks = Vec::new();
        for _ in 0..n {
            let at = r.pos();
            let p = Vector3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64);
            if !p.iter().all(|x| x.is_finite()) {
                return Err(FormatError::invalid(at, "non-finite landmark").into());
            }
            landmarks.push(p);
        }
        let db_start = r.pos();
        let mut db = ImageDatabase::from_bytes(&bytes[db_start..], vocab)?;
        if db.len() != keyframes.len() {
            return Err(FormatError::invalid(
                db_start,
                format!("database holds {} entries for {} keyframes", db.len(), keyframes.len()),
            )
            .into());
        }
        check_keyframes(&keyframes, landmarks.len())?;
        for (i, kf) in keyframes.iter().enumerate() {
            db.attach_descriptors(i as u32, kf.set.clone())?;
        }
        Ok(Self {
            keyframes,
            landmarks,
            db,
        })
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self, MapError> {
        Self::from_bytes(&read_file(path.as_ref())?, vocab)
    }
}

fn check_keyframes(keyframes: &[Keyframe], landmark_count: usize) -> Result<(), MapError> {
    for (i, kf) in keyframes.iter().enumerate() {
        if kf.set.keypoints().is_none() {
            return Err(MapError::Invalid(format!("keyframe {i} has no keypoints")));
        }
        if kf.landmarks.len() != kf.set.len() {
            return Err(MapError::Invalid(format!(
                "keyframe {i}: {} landmark indices for {} features",
                kf.landmarks.len(),
                kf.set.len()
            )));
        }
        if let Some(l) = kf
            .landmarks
            .iter()
            .find(|&&l| l != NO_LANDMARK && l as usize >= landmark_count)
        {
            return Err(MapError::Invalid(format!(
                "keyframe {i} references landmark {l} of {landmark_count}"
            )));
        }
    }
    Ok(())
}

/// Slowly accumulating odometry error applied when building a map from
/// simulated frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapDrift {
    /// Heading error accumulated per meter travelled.
    pub yaw_rate_rad_per_m: f64,
    /// Vertical error accumulated per meter travelled.
    pub climb_rate: f64,
    /// Landmark position noise std as a fraction of its depth.
    pub landmark_noise_frac: f64,
}

impl Default for MapDrift {
    fn default() -> Self {
        Self {
            yaw_rate_rad_per_m: 2e-4,
            climb_rate: 1e-3,
            landmark_noise_frac: 0.003,
        }
    }
}

impl MapDrift {
    pub fn none() -> Self {
        Self {
            yaw_rate_rad_per_m: 0.0,
            climb_rate: 0.0,
            landmark_noise_frac: 0.0,
        }
    }
}

/// A simulated map with the ground truth of its keyframes.
#[derive(Debug)]
pub struct SimMap {
    pub map: MapFile,
    pub keyframe_gt: BTreeMap<u32, Vector3<f64>>,
    pub keyframe_arc: Vec<f64>,
}

/// Builds a map from the frames of one pass whose arc length lies in
/// `section` (meters). Keyframe `k` is placed by integrating the true motion
/// rotated by the accumulated heading error; each landmark is placed from the
/// first keyframe that sees it.
pub fn build_sim_map(
    vocab: &Vocabulary,
    world: &World,
    frames: &[SimFrame],
    section: std::ops::Range<f64>,
    drift: &MapDrift,
    seed: u64,
    di_levels: usize,
) -> Result<SimMap, MapError> {
    let chosen: Vec<&SimFrame> = frames.iter().filter(|f| section.contains(&f.arc_m)).collect();
    let mut rng = XorShift64Star::new(derive_seed(seed, 0x4D41_5031));
    let mut keyframes = Vec::with_capacity(chosen.len());
    let mut keyframe_gt = BTreeMap::new();
    let mut keyframe_arc = Vec::with_capacity(chosen.len());
    let mut table: HashMap<u32, u32> = HashMap::new();
    let mut landmarks = Vec::new();
    let mut prev: Option<(Vector3<f64>, Vector3<f64>, f64)> = None;
    for (k, frame) in chosen.iter().enumerate() {
        let c = frame.truth.pose.center();
        let s = frame.arc_m;
        let travelled = prev.map(|(_, _, s0)| s - s0).unwrap_or(0.0);
        let arc0 = keyframe_arc.first().copied().unwrap_or(s);
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), drift.yaw_rate_rad_per_m * (s - arc0)).into_inner();
        let p = match prev {
            None => c,
            Some((c0, p0, _)) => p0 + rz * (c - c0) + Vector3::new(0.0, 0.0, drift.climb_rate * travelled),
        };
        let cam_to_world = rz * frame.truth.pose.rotation.transpose();
        let ids = frame
            .set
            .landmark_ids()
            .ok_or_else(|| MapError::Invalid(format!("frame at {s} m carries no landmark ids")))?;
        let mut idx = Vec::with_capacity(ids.len());
        for id in ids {
            let next = landmarks.len() as u32;
            let entry = *table.entry(*id).or_insert(next);
            if entry == next {
                let x = world
                    .landmarks
                    .get(*id as usize)
                    .ok_or_else(|| MapError::Invalid(format!("unknown landmark {id}")))?
                    .position;
                let sd = drift.landmark_noise_frac * (x - c).norm();
                let noise = Vector3::new(rng.normal(), rng.normal(), rng.normal()) * sd;
                landmarks.push(p + rz * (x - c) + noise);
            }
            idx.push(entry);
        }
        keyframes.push(Keyframe {
            pose: Pose::from_center(cam_to_world, p),
            set: Arc::new(frame.set.clone()),
            landmarks: idx,
        });
        keyframe_gt.insert(k as u32, c);
        keyframe_arc.push(s);
        prev = Some((c, p, s));
    }
    Ok(SimMap {
        map: MapFile::build(vocab, keyframes, landmarks, di_levels)?,
        keyframe_gt,
        keyframe_arc,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelocParams {
    pub loop_params: LoopParams,
    pub mode: LoopMode,
    pub window: u32,
    pub gate_m: f64,
    pub min_inliers: usize,
    pub pnp_threshold_px: f64,
    pub pnp_iters: usize,
}

impl Default for RelocParams {
    fn default() -> Self {
        Self {
            loop_params: LoopParams {
                alpha: DEFAULT_RELOC_ALPHA,
                temporal_k: DEFAULT_RELOC_TEMPORAL_K,
                min_inliers: 0,
                ..LoopParams::default()
            },
            mode: LoopMode::Islands,
            window: DEFAULT_ALIGN_WINDOW as u32,
            gate_m: DEFAULT_GATE_M,
            min_inliers: DEFAULT_RELOC_MIN_INLIERS,
            pnp_threshold_px: DEFAULT_PNP_THRESHOLD_PX,
            pnp_iters: DEFAULT_RANSAC_ITERS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelocStatus {
    Accepted,
    NoCandidates,
    LowNormalizedScore,
    TemporallyInconsistent,
    TooFewCorrespondences,
    PnpFailed,
    TooFewInliers,
    TooFarFromKeyframe,
}

impl RelocStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RelocStatus::Accepted => "accepted",
            RelocStatus::NoCandidates => "no_candidates",
            RelocStatus::LowNormalizedScore => "low_normalized_score",
            RelocStatus::TemporallyInconsistent => "temporally_inconsistent",
            RelocStatus::TooFewCorrespondences => "too_few_correspondences",
            RelocStatus::PnpFailed => "pnp_failed",
            RelocStatus::TooFewInliers => "too_few_inliers",
            RelocStatus::TooFarFromKeyframe => "too_far_from_keyframe",
        }
    }
}

impl fmt::Display for RelocStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelocRecord {
    pub query_id: u32,
    pub status: RelocStatus,
    pub matched_keyframe: Option<u32>,
    pub inliers: usize,
    /// Camera center in map coordinates, when a pose was estimated.
    pub position: Option<Vector3<f64>>,
    pub pose: Option<Pose>,
    /// Locally aligned error; present iff the frame was accepted.
    pub error_m: Option<f64>,
}

impl RelocRecord {
    fn rejected(query_id: u32, status: RelocStatus) -> Self {
        Self {
            query_id,
            status,
            matched_keyframe: None,
            inliers: 0,
            position: None,
            pose: None,
            error_m: None,
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.status == RelocStatus::Accepted
    }
}

/// Relocalizes each query in order: island search over the keyframe
/// database, descriptor matching against the chosen keyframe, PnP RANSAC
/// over the matched landmarks, then the inlier and distance gates. `query_gt[i]` is the true camera center
/// of `queries[i]`, and `keyframe_gt` the true keyframe centers used for the
/// local alignment. The map must have been built with the direct-index level
/// of `params.loop_params`.
pub fn relocalize_sequence(
    map: &MapFile,
    vocab: &Vocabulary,
    queries: &[DescriptorSet],
    query_gt: &[Vector3<f64>],
    keyframe_gt: &BTreeMap<u32, Vector3<f64>>,
    k: &Intrinsics,
    params: &RelocParams,
) -> Result<Vec<RelocRecord>, MapError> {
    if query_gt.len() != queries.len() {
        return Err(MapError::Invalid(format!(
            "{} ground-truth positions for {} queries",
            query_gt.len(),
            queries.len()
        )));
    }
    if !(params.gate_m > 0.0) {
        return Err(MapError::Invalid(format!("gate {} m", params.gate_m)));
    }
    let mut detector = LoopDetector::new(vocab, params.loop_params.clone(), params.mode)?;
    let centers = map.keyframe_centers();
    let mut out = Vec::with_capacity(queries.len());
    for (i, set) in queries.iter().enumerate() {
        let q = i as u32;
        let search = detector.search(&map.db, set, None)?;
        let hit = match search.outcome {
            Ok(h) if h.consistent => h,
            Ok(_) => {
                out.push(RelocRecord::rejected(q, RelocStatus::TemporallyInconsistent));
                continue;
            }
            Err(LoopStatus::LowNormalizedScore) => {
                out.push(RelocRecord::rejected(q, RelocStatus::LowNormalizedScore));
                continue;
            }
            Err(_) => {
                out.push(RelocRecord::rejected(q, RelocStatus::NoCandidates));
                continue;
            }
        };
        let mut rec = RelocRecord::rejected(q, RelocStatus::TooFewCorrespondences);
        rec.matched_keyframe = Some(hit.entry_id);
        let kf = &map.keyframes[hit.entry_id as usize];
        let kf_fv = &map.db.entry(hit.entry_id)?.fv;
        let matches = match_descriptors(set, &kf.set, Some(&search.fv), Some(kf_fv), &params.loop_params)?;
        let kps = set
            .keypoints()
            .ok_or_else(|| MapError::Loop(LoopError::MissingKeypoints("query".into())))?;
        let mut points = Vec::new();
        let mut pixels: Vec<Pixel> = Vec::new();
        for &(a, b) in &matches {
            let l = kf.landmarks[b as usize];
            if l != NO_LANDMARK {
                points.push(map.landmarks[l as usize]);
                let kp = kps[a as usize];
                pixels.push(Pixel::new(kp.x as f64, kp.y as f64));
            }
        }
        if points.len() < PNP_MIN_CORRESPONDENCES {
            out.push(rec);
            continue;
        }
        let seed = derive_seed(params.loop_params.seed, q as u64);
        let fit = match ransac_pnp(&points, &pixels, k, params.pnp_threshold_px, params.pnp_iters, seed) {
            Ok(f) => f,
            Err(GeomError::InvalidParameter(m)) => return Err(MapError::Geom(GeomError::InvalidParameter(m))),
            Err(_) => {
                rec.status = RelocStatus::PnpFailed;
                out.push(rec);
                continue;
            }
        };
        rec.inliers = fit.inlier_count;
        rec.position = Some(fit.pose.center());
        rec.pose = Some(fit.pose);
        if fit.inlier_count < params.min_inliers {
            rec.status = RelocStatus::TooFewInliers;
        } else if (fit.pose.center() - kf.pose.center()).norm() > params.gate_m {
            rec.status = RelocStatus::TooFarFromKeyframe;
        } else {
            rec.status = RelocStatus::Accepted;
            rec.error_m = Some(local_alignment_error(
                &centers,
                keyframe_gt,
                hit.entry_id,
                params.window,
                &fit.pose,
                &query_gt[i],
            )?);
        }
        out.push(rec);
    }
    Ok(out)
}
