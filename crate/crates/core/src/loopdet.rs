//! Loop-closure detection on top of the image database.
//!
//! Two protocols share the same verification stage (direct-index bucketed
//! matching followed by fundamental-matrix RANSAC):
//!
//! * best candidate: take the top raw BoW score, verify it;
//! * islands: normalize scores by the similarity to the previous query,
//!   group survivors into islands of adjacent entry ids, require temporal
//!   consistency with the previous queries, then verify the best entry of the
//!   best island.

use std::collections::VecDeque;
use std::fmt;
use std::ops::Range;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::descriptor::{hamming_bytes, l2_squared, Descriptor, DescriptorError, DescriptorSet, Keypoint};
use crate::format::FormatError;
use crate::geom::{ransac_fundamental, GeomError, Pixel, DEFAULT_F_THRESHOLD_PX, DEFAULT_RANSAC_ITERS};
use crate::index::{
    l1_score, transform, BowVector, FeatureVector, ImageDatabase, IndexError, QueryResult, DEFAULT_DI_LEVELS,
};
use crate::io::read_matches;
use crate::vocab::Vocabulary;

/// Queries whose similarity to the previous query is below this are not
/// normalized: the reference is too weak to be meaningful.
pub const MIN_NORMALIZER: f64 = 0.01;
/// Correspondences needed by the 8-point estimator.
const MIN_VERIFY_MATCHES: usize = 8;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("invalid loop parameters: {0}")]
    InvalidParams(String),
    #[error("database was built with a different vocabulary")]
    FingerprintMismatch,
    #[error("{0} has no keypoints; geometric verification needs them")]
    MissingKeypoints(String),
    #[error("database entry {0} has no stored descriptors")]
    MissingDescriptors(u32),
    #[error("match ({a}, {b}) out of range for sets of {len_a} and {len_b} features")]
    MatchOutOfRange { a: u32, b: u32, len_a: usize, len_b: usize },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopParams {
    /// Normalized-score threshold, in (0, 1].
    pub alpha: f64,
    pub max_island_gap: u32,
    /// Number of previous queries whose best island must overlap.
    pub temporal_k: usize,
    /// Most recent database entries skipped by [`LoopDetector::detect_and_add`].
    pub dislocal: u32,
    pub min_inliers: usize,
    /// Lowe ratio for float descriptors.
    pub ratio: f32,
    /// Largest accepted Hamming distance for binary descriptors.
    pub hamming_threshold: u32,
    pub ransac_threshold_px: f64,
    pub ransac_iters: usize,
    pub max_results: usize,
    pub di_levels: usize,
    pub seed: u64,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            max_island_gap: 3,
            temporal_k: 3,
            dislocal: 20,
            min_inliers: 12,
            ratio: 0.8,
            hamming_threshold: 64,
            ransac_threshold_px: DEFAULT_F_THRESHOLD_PX,
            ransac_iters: DEFAULT_RANSAC_ITERS,
            max_results: 50,
            di_levels: DEFAULT_DI_LEVELS,
            seed: 0,
        }
    }
}

impl LoopParams {
    pub fn validate(&self) -> Result<(), LoopError> {
        let bad = |m: &str| Err(LoopError::InvalidParams(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad("ratio must lie in (0, 1]");
        }
        if !(self.ransac_threshold_px > 0.0 && self.ransac_threshold_px.is_finite()) {
            return bad("RANSAC threshold must be positive");
        }
        if self.ransac_iters == 0 || self.max_results == 0 {
            return bad("RANSAC iterations and max results must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopMode {
    BestCandidate,
    Islands,
}

impl FromStr for LoopMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "best" | "best-candidate" => Ok(LoopMode::BestCandidate),
            "islands" => Ok(LoopMode::Islands),
            other => Err(format!("unknown loop mode {other:?} (expected best or islands)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopStatus {
    Accepted,
    NoCandidates,
    LowNormalizedScore,
    TemporallyInconsistent,
    VerificationFailed,
}

impl LoopStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            LoopStatus::Accepted => "accepted",
            LoopStatus::NoCandidates => "no_candidates",
            LoopStatus::LowNormalizedScore => "low_normalized_score",
            LoopStatus::TemporallyInconsistent => "temporally_inconsistent",
            LoopStatus::VerificationFailed => "verification_failed",
        }
    }
}

impl fmt::Display for LoopStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub entry_id: u32,
    /// Raw BoW score of the entry.
    pub score: f64,
    pub inlier_count: usize,
    /// Verified correspondences as (query feature, entry feature).
    pub matches: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopResult {
    pub status: LoopStatus,
    pub candidate: Option<Candidate>,
}

impl LoopResult {
    fn without(status: LoopStatus) -> Self {
        Self {
            status,
            candidate: None,
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.status == LoopStatus::Accepted
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Island {
    pub first_id: u32,
    pub last_id: u32,
    pub score: f64,
    pub best_entry: u32,
    pub best_score: f64,
}

/// Divides every score by `s_norm` and keeps those reaching `alpha`, in input
/// order. `None` when `s_norm` is below [`MIN_NORMALIZER`].
pub fn normalize_scores(results: &[QueryResult], s_norm: f64, alpha: f64) -> Option<Vec<(u32, f64)>> {
    if !(s_norm >= MIN_NORMALIZER) {
        return None;
    }
    Some(
        results
            .iter()
            .map(|r| (r.entry_id, r.score / s_norm))
            .filter(|(_, eta)| *eta >= alpha)
            .collect(),
    )
}

/// Groups candidates into runs whose consecutive ids differ by at most
/// `max_gap`, best island first (ties by lower first id).
pub fn build_islands(candidates: &[(u32, f64)], max_gap: u32) -> Vec<Island> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by_key(|c| c.0);
    let mut islands: Vec<Island> = Vec::new();
    for (id, eta) in sorted {
        match islands.last_mut() {
            Some(isl) if id - isl.last_id <= max_gap => {
                isl.last_id = id;
                isl.score += eta;
                if eta > isl.best_score {
                    isl.best_entry = id;
                    isl.best_score = eta;
                }
            }
            _ => islands.push(Island {
                first_id: id,
                last_id: id,
                score: eta,
                best_entry: id,
                best_score: eta,
            }),
        }
    }
    islands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.first_id.cmp(&b.first_id)));
    islands
}

/// True iff each of the last `k` islands in `history` overlaps
/// `[first - gap, last + gap]` of `current`.
pub fn temporal_check(history: &[Island], current: &Island, k: usize, gap: u32) -> bool {
    if k == 0 {
        return true;
    }
    if history.len() < k {
        return false;
    }
    let lo = current.first_id.saturating_sub(gap);
    let hi = current.last_id.saturating_add(gap);
    history[history.len() - k..]
        .iter()
        .all(|h| h.first_id <= hi && h.last_id >= lo)
}

/// Mutual nearest-neighbour matching restricted to features sharing a
/// direct-index node. Float pairs must pass the ratio test against the
/// second-nearest candidate in the same bucket (skipped when the bucket has a
/// single candidate); binary pairs must lie within the Hamming threshold.
///
/// With `None` feature vectors all features share one bucket.
pub fn match_descriptors(
    a: &DescriptorSet,
    b: &DescriptorSet,
    fv_a: Option<&FeatureVector>,
    fv_b: Option<&FeatureVector>,
    params: &LoopParams,
) -> Result<Vec<(u32, u32)>, LoopError> {
    a.signature().check_same(b.signature())?;
    let mut out = Vec::new();
    match (fv_a, fv_b) {
        (Some(fa), Some(fb)) => {
            for (node, ia) in fa.iter() {
                if let Some(ib) = fb.get(node) {
                    match_bucket(a.descriptors(), b.descriptors(), ia, ib, params, &mut out);
                }
            }
        }
        _ => {
            let ia: Vec<u32> = (0..a.len() as u32).collect();
            let ib: Vec<u32> = (0..b.len() as u32).collect();
            match_bucket(a.descriptors(), b.descriptors(), &ia, &ib, params, &mut out);
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn match_bucket(
    a: &[Descriptor],
    b: &[Descriptor],
    ia: &[u32],
    ib: &[u32],
    params: &LoopParams,
    out: &mut Vec<(u32, u32)>,
) {
    let cost = |i: u32, j: u32| -> f64 {
        match (&a[i as usize], &b[j as usize]) {
            (Descriptor::Binary(x), Descriptor::Binary(y)) => hamming_bytes(x, y) as f64,
            (Descriptor::Float(x), Descriptor::Float(y)) => l2_squared(x, y),
            _ => f64::INFINITY,
        }
    };
    let d: Vec<f64> = ia
        .iter()
        .flat_map(|&i| ib.iter().map(move |&j| (i, j)))
        .map(|(i, j)| cost(i, j))
        .collect();
    let nb = ib.len();
    let best_for_b: Vec<usize> = (0..nb)
        .map(|c| {
            (0..ia.len())
                .fold((usize::MAX, f64::INFINITY), |acc, r| {
                    if d[r * nb + c] < acc.1 {
                        (r, d[r * nb + c])
                    } else {
                        acc
                    }
                })
                .0
        })
        .collect();
    for (r, &i) in ia.iter().enumerate() {
        let row = &d[r * nb..(r + 1) * nb];
        let (mut best, mut first, mut second) = (usize::MAX, f64::INFINITY, f64::INFINITY);
        for (c, &v) in row.iter().enumerate() {
            if v < first {
                second = first;
                first = v;
                best = c;
            } else if v < second {
                second = v;
            }
        }
        if best == usize::MAX || best_for_b[best] != r {
            continue;
        }
        let pass = match &a[i as usize] {
            Descriptor::Binary(_) => first <= params.hamming_threshold as f64,
            // Squared distances: d1 < r d2  <=>  d1^2 < r^2 d2^2.
            Descriptor::Float(_) => {
                let r2 = (params.ratio as f64) * (params.ratio as f64);
                !second.is_finite() || first < r2 * second
            }
        };
        if pass {
            out.push((i, ib[best]));
        }
    }
}

/// Fundamental-matrix RANSAC over `matches` between query and entry
/// keypoints. Returns the inlier subset; fewer than eight matches verify
/// nothing.
pub fn verify_matches(
    query: &DescriptorSet,
    entry: &DescriptorSet,
    matches: &[(u32, u32)],
    params: &LoopParams,
) -> Result<Vec<(u32, u32)>, LoopError> {
    let kq = query
        .keypoints()
        .ok_or_else(|| LoopError::MissingKeypoints("query frame".into()))?;
    let ke = entry
        .keypoints()
        .ok_or_else(|| LoopError::MissingKeypoints("database entry".into()))?;
    check_matches(matches, kq.len(), ke.len())?;
    if matches.len() < MIN_VERIFY_MATCHES {
        return Ok(Vec::new());
    }
    let x1: Vec<Pixel> = matches.iter().map(|m| px(&kq[m.0 as usize])).collect();
    let x2: Vec<Pixel> = matches.iter().map(|m| px(&ke[m.1 as usize])).collect();
    match ransac_fundamental(&x1, &x2, params.ransac_threshold_px, params.ransac_iters, params.seed) {
        Ok(r) => Ok(matches
            .iter()
            .zip(&r.inliers)
            .filter(|(_, m)| **m)
            .map(|(p, _)| *p)
            .collect()),
        // Without parallax every skew-symmetric F fits and the estimate is
        // degenerate. The static-camera hypothesis x' = x is then the only
        // one left to test.
        Err(GeomError::Degenerate(_)) => Ok(matches
            .iter()
            .zip(x1.iter().zip(&x2))
            .filter(|(_, (a, b))| (*a - *b).norm() <= params.ransac_threshold_px)
            .map(|(m, _)| *m)
            .collect()),
        Err(_) => Ok(Vec::new()),
    }
}

fn px(k: &Keypoint) -> Pixel {
    Pixel::new(k.x as f64, k.y as f64)
}

fn check_matches(matches: &[(u32, u32)], len_a: usize, len_b: usize) -> Result<(), LoopError> {
    match matches
        .iter()
        .find(|(a, b)| *a as usize >= len_a || *b as usize >= len_b)
    {
        Some(&(a, b)) => Err(LoopError::MatchOutOfRange { a, b, len_a, len_b }),
        None => Ok(()),
    }
}

/// Where putative correspondences come from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum MatchSource {
    #[default]
    Internal,
    /// Precomputed `q{query:06}_e{entry:06}.mch` files; a missing file means
    /// no matches for that pair.
    Directory(PathBuf),
}

impl MatchSource {
    pub fn file_name(query_id: u32, entry_id: u32) -> String {
        format!("q{query_id:06}_e{entry_id:06}.mch")
    }

    #[allow(clippy::too_many_arguments)]
    fn matches(
        &self,
        query_id: u32,
        entry_id: u32,
        query: &DescriptorSet,
        entry: &DescriptorSet,
        fv_q: &FeatureVector,
        fv_e: &FeatureVector,
        params: &LoopParams,
    ) -> Result<Vec<(u32, u32)>, LoopError> {
        match self {
            MatchSource::Internal => match_descriptors(query, entry, Some(fv_q), Some(fv_e), params),
            MatchSource::Directory(dir) => {
                let path = dir.join(Self::file_name(query_id, entry_id));
                if !path.exists() {
                    return Ok(Vec::new());
                }
                let m = read_matches(&path)?;
                check_matches(&m, query.len(), entry.len())?;
                Ok(m)
            }
        }
    }
}

/// Candidate chosen by [`LoopDetector::search`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub entry_id: u32,
    /// Raw BoW score of the entry.
    pub score: f64,
    /// Whether the temporal check passed (always true in best-candidate mode).
    pub consistent: bool,
}

#[derive(Debug, Clone)]
pub struct Search {
    /// Direct index of the query frame.
    pub fv: FeatureVector,
    pub outcome: Result<Hit, LoopStatus>,
}

/// Stateful detector: remembers the previous query for score normalization
/// and recent best islands for the temporal check.
#[derive(Debug)]
pub struct LoopDetector<'v> {
    vocab: &'v Vocabulary,
    params: LoopParams,
    mode: LoopMode,
    source: MatchSource,
    history: VecDeque<Island>,
    previous: Option<BowVector>,
}

impl<'v> LoopDetector<'v> {
    pub fn new(vocab: &'v Vocabulary, params: LoopParams, mode: LoopMode) -> Result<Self, LoopError> {
        params.validate()?;
        if params.di_levels > vocab.levels() {
            return Err(LoopError::InvalidParams(format!(
                "direct-index level {} exceeds vocabulary depth {}",
                params.di_levels,
                vocab.levels()
            )));
        }
        Ok(Self {
            vocab,
            params,
            mode,
            source: MatchSource::Internal,
            history: VecDeque::new(),
            previous: None,
        })
    }

    pub fn with_match_source(mut self, source: MatchSource) -> Self {
        self.source = source;
        self
    }

    pub fn params(&self) -> &LoopParams {
        &self.params
    }

    pub fn mode(&self) -> LoopMode {
        self.mode
    }

    pub fn reset(&mut self) {
        self.history.clear();
        self.previous = None;
    }

    /// Looks for a loop against every entry of `db`.
    pub fn detect(
        &mut self,
        db: &ImageDatabase,
        query_id: u32,
        frame: &DescriptorSet,
    ) -> Result<LoopResult, LoopError> {
        self.detect_excluding(db, query_id, frame, None)
    }

    /// Online use: query while skipping the `dislocal` most recent entries,
    /// then append the frame. Returns the new entry id and the result.
    pub fn detect_and_add(
        &mut self,
        db: &mut ImageDatabase,
        frame: DescriptorSet,
    ) -> Result<(u32, LoopResult), LoopError> {
        let n = db.len() as u32;
        let exclude = n.saturating_sub(self.params.dislocal)..n;
        let result = self.detect_excluding(db, n, &frame, Some(exclude))?;
        let (bow, fv) = transform(self.vocab, &frame, self.params.di_levels)?;
        let id = db.add(bow, fv, Some(frame))?;
        Ok((id, result))
    }

    pub fn detect_excluding(
        &mut self,
        db: &ImageDatabase,
        query_id: u32,
        frame: &DescriptorSet,
        exclude: Option<Range<u32>>,
    ) -> Result<LoopResult, LoopError> {
        let search = self.search(db, frame, exclude)?;
        match search.outcome {
            Err(status) => Ok(LoopResult::without(status)),
            Ok(hit) if hit.consistent => self.verify(db, query_id, frame, &search.fv, hit.entry_id, hit.score),
            Ok(hit) => Ok(LoopResult {
                status: LoopStatus::TemporallyInconsistent,
                candidate: Some(Candidate {
                    entry_id: hit.entry_id,
                    score: hit.score,
                    inlier_count: 0,
                    matches: Vec::new(),
                }),
            }),
        }
    }

    /// Retrieval half of detection: scores the frame against `db` and picks
    /// a candidate without geometric verification. Updates the normalization
    /// and temporal state exactly as a full detection would.
    pub fn search(
        &mut self,
        db: &ImageDatabase,
        frame: &DescriptorSet,
        exclude: Option<Range<u32>>,
    ) -> Result<Search, LoopError> {
        if db.fingerprint() != self.vocab.fingerprint() {
            return Err(LoopError::FingerprintMismatch);
        }
        let (bow, fv) = transform(self.vocab, frame, self.params.di_levels)?;
        let outcome = match self.mode {
            LoopMode::BestCandidate => {
                let results = db.query(&bow, 1, exclude)?;
                self.previous = Some(bow);
                match results.first() {
                    None => Err(LoopStatus::NoCandidates),
                    Some(top) => Ok(Hit {
                        entry_id: top.entry_id,
                        score: top.score,
                        consistent: true,
                    }),
                }
            }
            LoopMode::Islands => self.search_islands(db, bow, exclude)?,
        };
        Ok(Search { fv, outcome })
    }

    fn search_islands(
        &mut self,
        db: &ImageDatabase,
        bow: BowVector,
        exclude: Option<Range<u32>>,
    ) -> Result<Result<Hit, LoopStatus>, LoopError> {
        let results = db.query(&bow, self.params.max_results, exclude)?;
        let s_norm = match &self.previous {
            Some(prev) => l1_score(&bow, prev)?,
            None => 1.0,
        };
        self.previous = Some(bow);
        if results.is_empty() {
            self.history.clear();
            return Ok(Err(LoopStatus::NoCandidates));
        }
        let normalized = match normalize_scores(&results, s_norm, self.params.alpha) {
            Some(n) if !n.is_empty() => n,
            _ => {
                self.history.clear();
                return Ok(Err(LoopStatus::LowNormalizedScore));
            }
        };
        let best = build_islands(&normalized, self.params.max_island_gap)[0];
        let consistent = temporal_check(
            self.history.make_contiguous(),
            &best,
            self.params.temporal_k,
            self.params.max_island_gap,
        );
        self.history.push_back(best);
        while self.history.len() > self.params.temporal_k {
            self.history.pop_front();
        }
        let raw = results
            .iter()
            .find(|r| r.entry_id == best.best_entry)
            .map(|r| r.score)
            .unwrap_or(0.0);
        Ok(Ok(Hit {
            entry_id: best.best_entry,
            score: raw,
            consistent,
        }))
    }

    fn verify(
        &self,
        db: &ImageDatabase,
        query_id: u32,
        frame: &DescriptorSet,
        fv: &FeatureVector,
        entry_id: u32,
        score: f64,
    ) -> Result<LoopResult, LoopError> {
        let entry_set = db
            .descriptors(entry_id)?
            .ok_or(LoopError::MissingDescriptors(entry_id))?;
        let entry_fv = &db.entry(entry_id)?.fv;
        let putative = self
            .source
            .matches(query_id, entry_id, frame, &entry_set, fv, entry_fv, &self.params)?;
        let inliers = verify_matches(frame, &entry_set, &putative, &self.params)?;
        let accepted = inliers.len() >= self.params.min_inliers;
        Ok(LoopResult {
            status: if accepted {
                LoopStatus::Accepted
            } else {
                LoopStatus::VerificationFailed
            },
            candidate: Some(Candidate {
                entry_id,
                score,
                inlier_count: inliers.len(),
                matches: inliers,
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::Signature;
    use crate::rng::XorShift64Star;
    use crate::vocab::{build_vocabulary, TrainingPool};
    use proptest::prelude::*;

    fn qr(entry_id: u32, score: f64) -> QueryResult {
        QueryResult { entry_id, score }
    }

    #[test]
    fn normalization() {
        let r = vec![qr(4, 0.5), qr(2, 0.2), qr(9, 0.1), qr(1, 0.06)];
        assert_eq!(
            normalize_scores(&r, 1.0, 0.05).unwrap(),
            vec![(4, 0.5), (2, 0.2), (9, 0.1), (1, 0.06)]
        );
        assert!(normalize_scores(&r, 1.0, 0.9).unwrap().is_empty());
        assert!(normalize_scores(&r, 0.009, 0.3).is_none());
        // Oracle: recompute by hand with s_norm 0.4 and alpha 0.3.
        let got = normalize_scores(&r, 0.4, 0.3).unwrap();
        let want: Vec<(u32, f64)> = vec![(4, 0.5 / 0.4), (2, 0.2 / 0.4)];
        assert_eq!(got, want);
    }

    #[test]
    fn islands_split_on_gaps() {
        let c = vec![(41, 0.4), (10, 0.5), (12, 0.3), (11, 0.9), (40, 0.2)];
        let isl = build_islands(&c, 3);
        assert_eq!(isl.len(), 2);
        assert_eq!((isl[0].first_id, isl[0].last_id, isl[0].best_entry), (10, 12, 11));
        assert!((isl[0].score - 1.7).abs() < 1e-12);
        assert_eq!((isl[1].first_id, isl[1].last_id, isl[1].best_entry), (40, 41, 41));
        assert!(build_islands(&[], 3).is_empty());
        let one = build_islands(&[(7, 0.25)], 3);
        assert_eq!(one[0].score, 0.25);
        assert_eq!((one[0].first_id, one[0].last_id), (7, 7));
    }

    #[test]
    fn island_best_entry_ties_to_lower_id() {
        let isl = build_islands(&[(5, 0.5), (6, 0.5)], 1);
        assert_eq!(isl[0].best_entry, 5);
    }

    proptest! {
        #[test]
        fn islands_partition_candidates(ids in proptest::collection::btree_set(0u32..200, 0..40), gap in 0u32..6) {
            let c: Vec<(u32, f64)> = ids.iter().map(|&i| (i, 1.0 + (i % 7) as f64)).collect();
            let isl = build_islands(&c, gap);
            let mut covered = 0;
            for (id, _) in &c {
                let n = isl.iter().filter(|s| s.first_id <= *id && *id <= s.last_id).count();
                prop_assert_eq!(n, 1);
                covered += 1;
            }
            prop_assert_eq!(covered, c.len());
            let total: f64 = isl.iter().map(|s| s.score).sum();
            let want: f64 = c.iter().map(|x| x.1).sum();
            prop_assert!((total - want).abs() < 1e-9);
            for w in isl.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }
    }

    #[test]
    fn temporal_consistency() {
        let isl = |a, b| Island {
            first_id: a,
            last_id: b,
            score: 1.0,
            best_entry: a,
            best_score: 1.0,
        };
        let cur = isl(10, 12);
        assert!(temporal_check(&[], &cur, 0, 3));
        assert!(temporal_check(&[cur, cur, cur], &cur, 3, 3));
        assert!(!temporal_check(&[cur, cur], &cur, 3, 3));
        assert!(!temporal_check(&[isl(40, 41), cur, cur], &cur, 3, 3));
        // Only the last k count.
        assert!(temporal_check(&[isl(40, 41), cur, cur, cur], &cur, 3, 3));
        // Within the gap on either side.
        assert!(temporal_check(&[isl(4, 7), isl(15, 20)], &cur, 2, 3));
        assert!(!temporal_check(&[isl(4, 6)], &cur, 1, 3));
    }

    fn float_set(seed: u64, n: usize, dim: usize, center: f32) -> DescriptorSet {
        let mut rng = XorShift64Star::new(seed);
        let d: Vec<Descriptor> = (0..n)
            .map(|_| Descriptor::Float((0..dim).map(|_| center + rng.normal() as f32).collect()))
            .collect();
        DescriptorSet::new(Signature::float(dim).unwrap(), d).unwrap()
    }

    #[test]
    fn identical_sets_match_identically() {
        let a = float_set(1, 30, 16, 0.0);
        let m = match_descriptors(&a, &a, None, None, &LoopParams::default()).unwrap();
        assert_eq!(m, (0..30).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn distant_clouds_fail_the_ratio_test() {
        let a = float_set(2, 30, 16, 0.0);
        let b = float_set(3, 30, 16, 100.0);
        assert!(match_descriptors(&a, &b, None, None, &LoopParams::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn binary_threshold_and_uniqueness() {
        let mut rng = XorShift64Star::new(4);
        let sig = Signature::binary(32).unwrap();
        let base: Vec<Descriptor> = (0..20)
            .map(|_| Descriptor::Binary((0..32).map(|_| rng.next_u64() as u8).collect()))
            .collect();
        // Copy with a few flipped bits, plus one descriptor flipped entirely.
        let mut copy = base.clone();
        for (i, d) in copy.iter_mut().enumerate() {
            if let Descriptor::Binary(b) = d {
                b[i % 32] ^= 0b101;
                if i == 7 {
                    b.iter_mut().for_each(|x| *x = !*x);
                }
            }
        }
        let a = DescriptorSet::new(sig, base).unwrap();
        let b = DescriptorSet::new(sig, copy).unwrap();
        let m = match_descriptors(&a, &b, None, None, &LoopParams::default()).unwrap();
        let want: Vec<(u32, u32)> = (0..20).filter(|i| *i != 7).map(|i| (i, i)).collect();
        assert_eq!(m, want);
        let mut seen_a = std::collections::HashSet::new();
        let mut seen_b = std::collections::HashSet::new();
        assert!(m.iter().all(|(x, y)| seen_a.insert(*x) && seen_b.insert(*y)));
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let a = float_set(1, 3, 32, 0.0);
        let b = DescriptorSet::new(Signature::binary(32).unwrap(), vec![Descriptor::Binary(vec![0; 32])]).unwrap();
        assert!(matches!(
            match_descriptors(&a, &b, None, None, &LoopParams::default()),
            Err(LoopError::Descriptor(_))
        ));
    }

    #[test]
    fn params_validation_and_mode_parsing() {
        assert!(LoopParams::default().validate().is_ok());
        let p = LoopParams {
            alpha: 0.0,
            ..LoopParams::default()
        };
        assert!(p.validate().is_err());
        let p = LoopParams {
            alpha: 1.5,
            ..LoopParams::default()
        };
        assert!(p.validate().is_err());
        assert_eq!("best".parse::<LoopMode>().unwrap(), LoopMode::BestCandidate);
        assert_eq!("islands".parse::<LoopMode>().unwrap(), LoopMode::Islands);
        assert!("x".parse::<LoopMode>().is_err());
        assert_eq!(MatchSource::file_name(3, 12), "q000003_e000012.mch");
    }

    /// A toy world: `n` float landmarks seen through a camera that projects
    /// landmark `i` to a fixed pixel grid, shifted per frame.
    fn frame(landmarks: &[Descriptor], ids: &[usize], shift: f32) -> DescriptorSet {
        let sig = Signature::float(landmarks[0].dim()).unwrap();
        let d: Vec<Descriptor> = ids.iter().map(|&i| landmarks[i].clone()).collect();
        let kp: Vec<Keypoint> = ids
            .iter()
            .map(|&i| {
                let (x, y) = ((i % 17) as f32 * 37.0 + 5.0, (i / 17) as f32 * 29.0 + 5.0);
                // Depth-dependent parallax keeps the pair non-planar.
                Keypoint::new(x + shift * (1.0 + (i % 5) as f32 * 0.3), y)
            })
            .collect();
        DescriptorSet::new(sig, d).unwrap().with_keypoints(kp).unwrap()
    }

    fn toy_vocab(landmarks: &[Descriptor]) -> Vocabulary {
        let sig = Signature::float(landmarks[0].dim()).unwrap();
        let mut pool = TrainingPool::new(sig);
        pool.add_image(DescriptorSet::new(sig, landmarks.to_vec()).unwrap())
            .unwrap();
        build_vocabulary(&pool, 4, 3, 1).unwrap()
    }

    fn landmarks(n: usize) -> Vec<Descriptor> {
        let mut rng = XorShift64Star::new(77);
        (0..n)
            .map(|_| Descriptor::Float((0..16).map(|_| rng.normal() as f32).collect()))
            .collect()
    }

    #[test]
    fn empty_database_has_no_candidates() {
        let lm = landmarks(60);
        let vocab = toy_vocab(&lm);
        let db = ImageDatabase::new(&vocab);
        let q = frame(&lm, &(0..40).collect::<Vec<_>>(), 0.0);
        for mode in [LoopMode::BestCandidate, LoopMode::Islands] {
            let mut det = LoopDetector::new(&vocab, LoopParams::default(), mode).unwrap();
            assert_eq!(det.detect(&db, 0, &q).unwrap().status, LoopStatus::NoCandidates);
        }
    }

    #[test]
    fn identical_frame_is_accepted() {
        let lm = landmarks(120);
        let vocab = toy_vocab(&lm);
        let mut db = ImageDatabase::new(&vocab);
        let frames: Vec<DescriptorSet> = (0..4)
            .map(|k| frame(&lm, &((k * 30)..(k * 30 + 30)).collect::<Vec<_>>(), 0.0))
            .collect();
        for f in &frames {
            let (bow, fv) = transform(&vocab, f, 2).unwrap();
            db.add(bow, fv, Some(f.clone())).unwrap();
        }
        let mut det = LoopDetector::new(&vocab, LoopParams::default(), LoopMode::BestCandidate).unwrap();
        let r = det.detect(&db, 0, &frames[2]).unwrap();
        assert_eq!(r.status, LoopStatus::Accepted);
        let c = r.candidate.unwrap();
        assert_eq!(c.entry_id, 2);
        assert_eq!(c.score, 1.0);
        assert_eq!(c.inlier_count, 30);

        // Shifted view of the same landmarks still verifies.
        let moved = frame(&lm, &(60..90).collect::<Vec<_>>(), 12.0);
        let r = det.detect(&db, 1, &moved).unwrap();
        assert!(r.is_accepted());
        assert_eq!(r.candidate.unwrap().entry_id, 2);
    }

    #[test]
    fn raising_min_inliers_never_adds_acceptances() {
        let lm = landmarks(120);
        let vocab = toy_vocab(&lm);
        let mut db = ImageDatabase::new(&vocab);
        for k in 0..4 {
            let f = frame(&lm, &((k * 30)..(k * 30 + 30)).collect::<Vec<_>>(), 0.0);
            let (bow, fv) = transform(&vocab, &f, 2).unwrap();
            db.add(bow, fv, Some(f)).unwrap();
        }
        let mut rng = XorShift64Star::new(5);
        let queries: Vec<DescriptorSet> = (0..12)
            .map(|_| {
                let start = rng.below(100);
                let n = 8 + rng.below(20);
                frame(
                    &lm,
                    &(start..(start + n).min(120)).collect::<Vec<_>>(),
                    rng.uniform(0.0, 20.0) as f32,
                )
            })
            .collect();
        let mut prev: Option<Vec<bool>> = None;
        for min_inliers in [0, 5, 10, 15, 20, 25, 30] {
            let params = LoopParams {
                min_inliers,
                ..LoopParams::default()
            };
            let mut det = LoopDetector::new(&vocab, params, LoopMode::BestCandidate).unwrap();
            let acc: Vec<bool> = queries
                .iter()
                .enumerate()
                .map(|(i, q)| {
                    let r = det.detect(&db, i as u32, q).unwrap();
                    if let Some(c) = &r.candidate {
                        assert!(!r.is_accepted() || c.inlier_count >= min_inliers);
                    }
                    r.is_accepted()
                })
                .collect();
            if min_inliers == 0 {
                // Pure BoW ranking: every query with a candidate is accepted.
                assert!(acc.iter().all(|a| *a));
            }
            if let Some(p) = &prev {
                assert!(acc.iter().zip(p).all(|(now, before)| !*now || *before));
            }
            prev = Some(acc);
        }
    }

    #[test]
    fn islands_need_temporal_consistency_and_reject_foreign_vocabularies() {
        let lm = landmarks(200);
        let vocab = toy_vocab(&lm);
        let mut db = ImageDatabase::new(&vocab);
        let seq: Vec<DescriptorSet> = (0..15)
            .map(|k| frame(&lm, &((k * 10)..(k * 10 + 40)).collect::<Vec<_>>(), 0.0))
            .collect();
        for f in &seq {
            let (bow, fv) = transform(&vocab, f, 2).unwrap();
            db.add(bow, fv, Some(f.clone())).unwrap();
        }
        let params = LoopParams {
            alpha: 0.1,
            ..LoopParams::default()
        };
        let mut det = LoopDetector::new(&vocab, params, LoopMode::Islands).unwrap();
        let statuses: Vec<LoopStatus> = (3..9)
            .map(|k| {
                det.detect(
                    &db,
                    k as u32,
                    &frame(&lm, &((k * 10)..(k * 10 + 40)).collect::<Vec<_>>(), 3.0),
                )
                .unwrap()
                .status
            })
            .collect();
        assert_eq!(&statuses[..3], &[LoopStatus::TemporallyInconsistent; 3]);
        assert!(statuses[3..].iter().all(|s| *s == LoopStatus::Accepted), "{statuses:?}");

        let other = toy_vocab(&landmarks(60)[..]);
        let other = if other.fingerprint() == vocab.fingerprint() {
            build_vocabulary(
                &{
                    let mut p = TrainingPool::new(Signature::float(16).unwrap());
                    p.add_image(float_set(9, 50, 16, 0.0)).unwrap();
                    p
                },
                3,
                2,
                0,
            )
            .unwrap()
        } else {
            other
        };
        let mut det = LoopDetector::new(&other, LoopParams::default(), LoopMode::BestCandidate).unwrap();
        assert!(matches!(
            det.detect(&db, 0, &seq[0]),
            Err(LoopError::FingerprintMismatch)
        ));
    }

    #[test]
    fn detect_and_add_skips_recent_entries() {
        let lm = landmarks(60);
        let vocab = toy_vocab(&lm);
        let mut db = ImageDatabase::new(&vocab);
        let params = LoopParams {
            dislocal: 2,
            min_inliers: 0,
            ..LoopParams::default()
        };
        let mut det = LoopDetector::new(&vocab, params, LoopMode::BestCandidate).unwrap();
        let f = frame(&lm, &(0..30).collect::<Vec<_>>(), 0.0);
        let (id0, r0) = det.detect_and_add(&mut db, f.clone()).unwrap();
        assert_eq!((id0, r0.status), (0, LoopStatus::NoCandidates));
        let (_, r1) = det.detect_and_add(&mut db, f.clone()).unwrap();
        assert_eq!(r1.status, LoopStatus::NoCandidates);
        let (_, r2) = det.detect_and_add(&mut db, f.clone()).unwrap();
        assert_eq!(r2.status, LoopStatus::NoCandidates);
        let (id3, r3) = det.detect_and_add(&mut db, f.clone()).unwrap();
        assert_eq!(id3, 3);
        assert_eq!(r3.candidate.unwrap().entry_id, 0);
    }

    #[test]
    fn precomputed_matches_are_read_from_disk() {
        let lm = landmarks(60);
        let vocab = toy_vocab(&lm);
        let mut db = ImageDatabase::new(&vocab);
        let f = frame(&lm, &(0..30).collect::<Vec<_>>(), 0.0);
        let (bow, fv) = transform(&vocab, &f, 2).unwrap();
        db.add(bow, fv, Some(f.clone())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pairs: Vec<(u32, u32)> = (0..20).map(|i| (i, i)).collect();
        crate::io::write_matches(&pairs, dir.path().join(MatchSource::file_name(5, 0))).unwrap();
        let mut det = LoopDetector::new(&vocab, LoopParams::default(), LoopMode::BestCandidate)
            .unwrap()
            .with_match_source(MatchSource::Directory(dir.path().to_path_buf()));
        let r = det.detect(&db, 5, &f).unwrap();
        assert_eq!(r.candidate.unwrap().inlier_count, 20);
        // No file for query 6: nothing to verify.
        let r = det.detect(&db, 6, &f).unwrap();
        assert_eq!(r.status, LoopStatus::VerificationFailed);
        crate::io::write_matches(&[(99, 0)], dir.path().join(MatchSource::file_name(7, 0))).unwrap();
        assert!(matches!(det.detect(&db, 7, &f), Err(LoopError::MatchOutOfRange { .. })));
    }
}
