//! Evaluation protocols: recall at 100% precision for place recognition,
//! timelapse match counting, simulated vocabulary training, and the
//! distance and database micro-benchmarks.

use std::time::Instant;

use nalgebra::Vector3;
use thiserror::Error;

use crate::descriptor::{hamming_bytes, l2_squared, Descriptor, DescriptorError, DescriptorSet, Signature};
use crate::geom::Pixel;
use crate::index::{transform, ImageDatabase, IndexError};
use crate::loopdet::{match_descriptors, LoopDetector, LoopError, LoopMode, LoopParams};
use crate::rng::{derive_seed, XorShift64Star};
use crate::simgen::{truth_matches, FrameTruth, Scenario, SimError, SimFrame};
use crate::vocab::{assign_idf, build_vocabulary_with, TrainParams, TrainingPool, VocabError, Vocabulary};

/// True-positive radius for place recognition.
pub const DEFAULT_TP_RADIUS_M: f64 = 10.0;
pub const DEFAULT_QUERY_COUNT: usize = 100;
pub const DEFAULT_PX_TOL: f64 = 3.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluation records")]
    NoRecords,
    #[error("empty benchmark")]
    EmptyBenchmark,
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub query_id: u32,
    pub candidate_id: Option<u32>,
    pub bow_score: f64,
    pub inlier_count: usize,
    pub is_true_positive: bool,
}

impl EvalRecord {
    fn is_false_positive(&self) -> bool {
        self.candidate_id.is_some() && !self.is_true_positive
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallSummary {
    /// Minimum inlier count for acceptance.
    pub threshold: usize,
    pub recall: f64,
    pub queries: usize,
    pub accepted: usize,
}

/// Smallest inlier threshold that rejects every false positive, and the
/// fraction of queries whose true-positive record still passes it. Without
/// false positives the threshold is the smallest inlier count.
pub fn recall_at_full_precision(records: &[EvalRecord]) -> Result<RecallSummary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let threshold = match records
        .iter()
        .filter(|r| r.is_false_positive())
        .map(|r| r.inlier_count)
        .max()
    {
        Some(worst) => worst + 1,
        None => records.iter().map(|r| r.inlier_count).min().unwrap_or(0),
    };
    let accepted = records
        .iter()
        .filter(|r| r.is_true_positive && r.inlier_count >= threshold)
        .count();
    Ok(RecallSummary {
        threshold,
        recall: accepted as f64 / records.len() as f64,
        queries: records.len(),
        accepted,
    })
}

/// `count` indices spread evenly over `0..n` (all of them when `count >= n`).
pub fn uniform_query_indices(n: usize, count: usize) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    (0..count).map(|i| i * n / count).collect()
}

/// Restricts each frame to the features that also appear in an adjacent
/// frame of the sequence, using the landmark ids carried by the sets.
pub fn sequential_matched_subsets(sets: &[DescriptorSet]) -> Result<Vec<DescriptorSet>, EvalError> {
    let ids: Vec<&[u32]> = sets
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.landmark_ids()
                .ok_or_else(|| EvalError::Invalid(format!("frame {i} has no landmark ids")))
        })
        .collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        let mut neighbours: Vec<u32> = Vec::new();
        if i > 0 {
            neighbours.extend_from_slice(ids[i - 1]);
        }
        if i + 1 < sets.len() {
            neighbours.extend_from_slice(ids[i + 1]);
        }
        neighbours.sort_unstable();
        let keep: Vec<usize> = ids[i]
            .iter()
            .enumerate()
            .filter(|(_, id)| neighbours.binary_search(id).is_ok())
            .map(|(j, _)| j)
            .collect();
        out.push(set.select(&keep)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceRecognitionParams {
    pub radius_m: f64,
    pub query_count: usize,
    pub loop_params: LoopParams,
}

impl Default for PlaceRecognitionParams {
    fn default() -> Self {
        Self {
            radius_m: DEFAULT_TP_RADIUS_M,
            query_count: DEFAULT_QUERY_COUNT,
            loop_params: LoopParams {
                min_inliers: 0,
                ..LoopParams::default()
            },
        }
    }
}

/// Builds a database from `db_frames`, queries it with evenly spread frames of
/// `query_frames` in best-candidate mode and records the verified inlier
/// count of each top candidate. A candidate is a true positive when its
/// position lies within `radius_m` of the query's.
pub fn place_recognition(
    vocab: &Vocabulary,
    db_frames: &[DescriptorSet],
    db_positions: &[Vector3<f64>],
    query_frames: &[DescriptorSet],
    query_positions: &[Vector3<f64>],
    params: &PlaceRecognitionParams,
) -> Result<Vec<EvalRecord>, EvalError> {
    if db_frames.len() != db_positions.len() || query_frames.len() != query_positions.len() {
        return Err(EvalError::Invalid("one position per frame is required".into()));
    }
    if !(params.radius_m > 0.0) {
        return Err(EvalError::Invalid(format!("radius {} m", params.radius_m)));
    }
    let mut db = ImageDatabase::new(vocab);
    for set in db_frames {
        let (bow, fv) = transform(vocab, set, params.loop_params.di_levels)?;
        db.add(bow, fv, Some(set.clone()))?;
    }
    let mut detector = LoopDetector::new(vocab, params.loop_params.clone(), LoopMode::BestCandidate)?;
    let mut records = Vec::new();
    for q in uniform_query_indices(query_frames.len(), params.query_count) {
        let result = detector.detect(&db, q as u32, &query_frames[q])?;
        let record = match result.candidate {
            Some(c) => EvalRecord {
                query_id: q as u32,
                candidate_id: Some(c.entry_id),
                bow_score: c.score,
                inlier_count: c.inlier_count,
                is_true_positive: (db_positions[c.entry_id as usize] - query_positions[q]).norm() <= params.radius_m,
            },
            None => EvalRecord {
                query_id: q as u32,
                candidate_id: None,
                bow_score: 0.0,
                inlier_count: 0,
                is_true_positive: false,
            },
        };
        records.push(record);
    }
    Ok(records)
}

/// Correct and total match counts of one timelapse frame against the
/// reference frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelapseCount {
    pub tau: f64,
    pub matches: usize,
    pub correct: usize,
}

/// Matches every frame to `frames[reference]`. A match is correct when both
/// features observe the same landmark and both keypoints lie within
/// `px_tol` of that landmark's true projection. With a vocabulary, matching
/// is restricted to shared direct-index nodes.
pub fn timelapse_eval(
    frames: &[(DescriptorSet, FrameTruth)],
    reference: usize,
    px_tol: f64,
    vocab: Option<&Vocabulary>,
    params: &LoopParams,
) -> Result<Vec<TimelapseCount>, EvalError> {
    let (ref_set, ref_truth) = frames
        .get(reference)
        .ok_or_else(|| EvalError::Invalid(format!("reference frame {reference} of {}", frames.len())))?;
    if !(px_tol >= 0.0) {
        return Err(EvalError::Invalid(format!("pixel tolerance {px_tol}")));
    }
    let fv_of = |set: &DescriptorSet| -> Result<_, EvalError> {
        Ok(match vocab {
            Some(v) => Some(transform(v, set, params.di_levels)?.1),
            None => None,
        })
    };
    let ref_fv = fv_of(ref_set)?;
    let ref_kp = ref_set
        .keypoints()
        .ok_or_else(|| EvalError::Invalid("reference frame has no keypoints".into()))?;
    let mut out = Vec::with_capacity(frames.len());
    for (set, truth) in frames {
        let fv = fv_of(set)?;
        let m = match_descriptors(set, ref_set, fv.as_ref(), ref_fv.as_ref(), params)?;
        let kp = set
            .keypoints()
            .ok_or_else(|| EvalError::Invalid("timelapse frame has no keypoints".into()))?;
        let within =
            |k: &crate::descriptor::Keypoint, p: &Pixel| (Pixel::new(k.x as f64, k.y as f64) - p).norm() <= px_tol;
        let correct = m
            .iter()
            .filter(|&&(a, b)| {
                let (a, b) = (a as usize, b as usize);
                truth.landmark_ids[a] == ref_truth.landmark_ids[b]
                    && within(&kp[a], &truth.projections[a])
                    && within(&ref_kp[b], &ref_truth.projections[b])
            })
            .count();
        out.push(TimelapseCount {
            tau: truth.tau,
            matches: m.len(),
            correct,
        });
    }
    Ok(out)
}

/// Where vocabulary training data comes from: separate worlds rendered at
/// several times of day, consecutive frames paired by their true matches.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTraining {
    pub world_seeds: Vec<u64>,
    pub taus: Vec<f64>,
    /// Use every `frame_stride`-th consecutive pair.
    pub frame_stride: usize,
    pub params: TrainParams,
}

impl Default for SimTraining {
    fn default() -> Self {
        Self {
            world_seeds: vec![101, 102],
            taus: vec![0.0, 0.25, 0.5],
            frame_stride: 2,
            params: TrainParams::default(),
        }
    }
}

/// Renders the training passes described by `training` with the world,
/// drift and camera of `template` and collects matched features.
pub fn sim_training_pool(template: &Scenario, training: &SimTraining) -> Result<TrainingPool, EvalError> {
    let stride = training.frame_stride.max(1);
    let mut pool: Option<TrainingPool> = None;
    for &ws in &training.world_seeds {
        let mut sc = template.clone();
        sc.seed = ws;
        let spec = sc.passes[0].clone();
        sc.passes = training
            .taus
            .iter()
            .map(|&tau| {
                let mut p = spec.clone();
                p.tau = tau;
                p
            })
            .collect();
        let world = sc.world()?;
        for pass in 0..sc.passes.len() {
            let frames = sc.render_pass(&world, pass)?;
            for i in (0..frames.len().saturating_sub(1)).step_by(stride) {
                let (a, b) = (&frames[i], &frames[i + 1]);
                let pool = pool.get_or_insert_with(|| TrainingPool::new(a.set.signature()));
                pool.add_pair(&a.set, &b.set, &truth_matches(&a.truth, &b.truth))?;
            }
        }
    }
    pool.ok_or_else(|| EvalError::Invalid("training produced no frame pairs".into()))
}

/// Trains a vocabulary on [`sim_training_pool`] and weights it by IDF over
/// the same images.
pub fn train_sim_vocabulary(template: &Scenario, training: &SimTraining) -> Result<Vocabulary, EvalError> {
    let pool = sim_training_pool(template, training)?;
    let vocab = build_vocabulary_with(&pool, &training.params)?;
    Ok(assign_idf(&vocab, pool.images())?)
}

/// Positions of simulated frames, for place recognition.
pub fn frame_positions(frames: &[SimFrame]) -> Vec<Vector3<f64>> {
    frames.iter().map(|f| f.truth.pose.center()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceBench {
    pub pairs: usize,
    pub l2_ns: f64,
    pub hamming_ns: f64,
    /// `l2_ns / hamming_ns`.
    pub ratio: f64,
}

/// Times L2 over random float pairs of `dim_float` components against
/// Hamming over random `bits_binary`-bit pairs.
pub fn bench_distances(
    dim_float: usize,
    bits_binary: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<DistanceBench, EvalError> {
    if n_pairs == 0 {
        return Err(EvalError::EmptyBenchmark);
    }
    if dim_float == 0 || bits_binary == 0 || !bits_binary.is_multiple_of(8) {
        return Err(EvalError::Invalid(format!(
            "dimensions {dim_float} float / {bits_binary} bits"
        )));
    }
    let mut rng = XorShift64Star::new(seed);
    let pool = n_pairs.min(1024) + 1;
    let floats: Vec<Vec<f32>> = (0..pool)
        .map(|_| (0..dim_float).map(|_| rng.normal() as f32).collect())
        .collect();
    let bins: Vec<Vec<u8>> = (0..pool)
        .map(|_| (0..bits_binary / 8).map(|_| rng.next_u64() as u8).collect())
        .collect();
    let rounds = (1_000_000 / n_pairs).clamp(1, 1000);
    let time = |f: &mut dyn FnMut(usize) -> f64| -> f64 {
        let mut sink = 0.0;
        let start = Instant::now();
        for _ in 0..rounds {
            for i in 0..n_pairs {
                sink += f(i % (pool - 1));
            }
        }
        let ns = start.elapsed().as_nanos() as f64;
        std::hint::black_box(sink);
        (ns / (rounds * n_pairs) as f64).max(f64::MIN_POSITIVE)
    };
    let l2_ns = time(&mut |i| l2_squared(std::hint::black_box(&floats[i]), &floats[i + 1]).sqrt());
    let hamming_ns = time(&mut |i| hamming_bytes(std::hint::black_box(&bins[i]), &bins[i + 1]) as f64);
    Ok(DistanceBench {
        pairs: n_pairs,
        l2_ns,
        hamming_ns,
        ratio: l2_ns / hamming_ns,
    })
}

/// Random descriptor sets matching `signature`: unit Gaussian vectors or
/// uniform bits.
pub fn random_sets(
    signature: Signature,
    count: usize,
    features: usize,
    seed: u64,
) -> Result<Vec<DescriptorSet>, EvalError> {
    (0..count)
        .map(|i| {
            let mut rng = XorShift64Star::new(derive_seed(seed, i as u64));
            let ds = (0..features)
                .map(|_| match signature.kind {
                    crate::descriptor::DescriptorKind::Float => {
                        let v: Vec<f64> = (0..signature.dim).map(|_| rng.normal()).collect();
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        Descriptor::Float(v.iter().map(|x| (x / n) as f32).collect())
                    }
                    crate::descriptor::DescriptorKind::Binary => {
                        Descriptor::Binary((0..signature.row_bytes()).map(|_| rng.next_u64() as u8).collect())
                    }
                })
                .collect();
            Ok(DescriptorSet::new(signature, ds)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatabaseBench {
    pub entries: usize,
    pub features: usize,
    /// Add+query throughput building the direct index.
    pub images_per_s_di: f64,
    /// Add+query throughput with the direct index at the root (one bucket).
    pub images_per_s_no_di: f64,
}

/// Per image: transform, query the database built so far, add. Timed
/// single-threaded over `n_entries` random images.
pub fn bench_database(
    n_entries: usize,
    features_per_image: usize,
    vocab: &Vocabulary,
    di_levels: usize,
    seed: u64,
) -> Result<DatabaseBench, EvalError> {
    if n_entries == 0 || features_per_image == 0 {
        return Err(EvalError::EmptyBenchmark);
    }
    let sets = random_sets(vocab.signature(), n_entries, features_per_image, seed)?;
    let run = |levels: usize| -> Result<f64, EvalError> {
        let mut db = ImageDatabase::new(vocab);
        let start = Instant::now();
        for set in &sets {
            let (bow, fv) = transform(vocab, set, levels)?;
            std::hint::black_box(db.query(&bow, LoopParams::default().max_results, None)?);
            db.add(bow, fv, None)?;
        }
        Ok(n_entries as f64 / start.elapsed().as_secs_f64().max(1e-12))
    };
    Ok(DatabaseBench {
        entries: n_entries,
        features: features_per_image,
        images_per_s_di: run(di_levels)?,
        images_per_s_no_di: run(vocab.levels())?,
    })
}
