//! Bag-of-words vectors, the direct index, L1 scoring and the inverted-file
//! image database with its `.idb` (IDB1) file format.
//!
//! IDB1 layout, little-endian:
//!
//! ```text
//! "IDB1" | vocabulary fingerprint (32 bytes) | entry count u32
//! | per entry: bow count u32, count x (u32 word, f32 weight)
//! |            fv count u32, count x (u32 node, u32 n, n x u32 feature index)
//! |            descriptor blob offset u64 (u64::MAX: no descriptors)
//! | blob region: concatenated DSC1 records
//! ```
//!
//! Blob offsets are relative to the start of the blob region.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Seek, SeekFrom};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use thiserror::Error;

use crate::descriptor::{DescriptorError, DescriptorSet};
use crate::format::{count_u32, put_f32, put_u32, put_u64, write_file, ByteReader, FormatError, StreamReader};
use crate::io::{decode_descriptor_set, encode_descriptor_set, read_descriptor_set_from};
use crate::vocab::Vocabulary;

pub const IDB_MAGIC: &[u8; 4] = b"IDB1";
pub const DEFAULT_DI_LEVELS: usize = 2;
const NO_BLOB: u64 = u64::MAX;
/// Accepted deviation of a normalized vector's L1 norm from 1.
const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("BoW vector is not L1-normalized (norm {0})")]
    NotNormalized(f64),
    #[error("invalid BoW vector: {0}")]
    InvalidVector(String),
    #[error("direct-index level {di_levels} exceeds vocabulary depth {levels}")]
    InvalidLevels { di_levels: usize, levels: usize },
    #[error("word {word} is outside the vocabulary ({word_count} words)")]
    UnknownWord { word: u32, word_count: usize },
    #[error("no database entry {0}")]
    UnknownEntry(u32),
    #[error("database was built with a different vocabulary")]
    FingerprintMismatch,
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Sparse word histogram sorted by word id, without zero entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BowVector {
    entries: Vec<(u32, f32)>,
    norm: f64,
}

impl BowVector {
    /// L1-normalizes arbitrary non-negative word weights; duplicate words are
    /// summed and zero totals dropped.
    pub fn from_weights(mut weights: Vec<(u32, f64)>) -> Result<Self, IndexError> {
        weights.sort_by_key(|e| e.0);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(weights.len());
        for (w, x) in weights {
            if !x.is_finite() || x < 0.0 {
                return Err(IndexError::InvalidVector(format!("weight {x} for word {w}")));
            }
            match merged.last_mut() {
                Some(last) if last.0 == w => last.1 += x,
                _ => merged.push((w, x)),
            }
        }
        merged.retain(|e| e.1 > 0.0);
        let total: f64 = merged.iter().map(|e| e.1).sum();
        let entries: Vec<(u32, f32)> = merged
            .into_iter()
            .map(|(w, x)| (w, (x / total) as f32))
            .filter(|e| e.1 > 0.0)
            .collect();
        Ok(Self::from_sorted(entries))
    }

    /// Wraps entries that are already normalized, sorted and positive.
    pub fn from_normalized(entries: Vec<(u32, f32)>) -> Result<Self, IndexError> {
        for pair in entries.windows(2) {
            if pair[0].0 >= pair[1].0 {
                return Err(IndexError::InvalidVector(format!(
                    "word ids not strictly increasing at {}",
                    pair[1].0
                )));
            }
        }
        if let Some(e) = entries.iter().find(|e| !(e.1.is_finite() && e.1 > 0.0)) {
            return Err(IndexError::InvalidVector(format!("weight {} for word {}", e.1, e.0)));
        }
        let v = Self::from_sorted(entries);
        v.check_normalized()?;
        Ok(v)
    }

    fn from_sorted(entries: Vec<(u32, f32)>) -> Self {
        let norm = entries.iter().map(|e| e.1 as f64).sum();
        Self { entries, norm }
    }

    pub fn entries(&self) -> &[(u32, f32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.norm
    }

    pub fn get(&self, word: u32) -> Option<f32> {
        self.entries
            .binary_search_by_key(&word, |e| e.0)
            .ok()
            .map(|i| self.entries[i].1)
    }

    fn check_normalized(&self) -> Result<(), IndexError> {
        if !self.entries.is_empty() && (self.norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(IndexError::NotNormalized(self.norm));
        }
        Ok(())
    }
}

/// Feature indices grouped by the vocabulary node a fixed number of levels
/// above each feature's leaf.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector {
    nodes: BTreeMap<u32, Vec<u32>>,
}

impl FeatureVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, node: u32, feature: u32) {
        self.nodes.entry(node).or_default().push(feature);
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[u32])> {
        self.nodes.iter().map(|(n, f)| (*n, f.as_slice()))
    }

    pub fn get(&self, node: u32) -> Option<&[u32]> {
        self.nodes.get(&node).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.nodes.values().map(|v| v.len()).sum()
    }
}

/// Term frequency times IDF per word, L1-normalized, plus the direct index at
/// `di_levels` above the leaves (clamped at the root for shallow leaves).
pub fn transform(
    vocab: &Vocabulary,
    set: &DescriptorSet,
    di_levels: usize,
) -> Result<(BowVector, FeatureVector), IndexError> {
    if di_levels > vocab.levels() {
        return Err(IndexError::InvalidLevels {
            di_levels,
            levels: vocab.levels(),
        });
    }
    vocab.signature().check_same(set.signature())?;
    let mut weights: Vec<(u32, f64)> = Vec::with_capacity(set.len());
    let mut fv = FeatureVector::new();
    for (i, d) in set.descriptors().iter().enumerate() {
        let leaf = vocab.descend(d);
        let node = vocab.node(leaf);
        weights.push((node.word_id.expect("leaf"), node.weight as f64));
        fv.push(vocab.ancestor(leaf, di_levels), i as u32);
    }
    Ok((BowVector::from_weights(weights)?, fv))
}

/// `1 - 0.5 * sum |u_i - v_i|` for L1-normalized vectors, evaluated as
/// `1 - (0.5 * (|u| + |v|) - sum min(u_i, v_i))` over the shared words so
/// that identical vectors score exactly 1. Vectors without a shared word
/// score 0.
pub fn l1_score(u: &BowVector, v: &BowVector) -> Result<f64, IndexError> {
    u.check_normalized()?;
    v.check_normalized()?;
    let (a, b) = (u.entries(), v.entries());
    let (mut i, mut j) = (0, 0);
    let mut common = 0.0f64;
    let mut shared = false;
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += a[i].1.min(b[j].1) as f64;
                shared = true;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(if shared {
        finish_score(u.norm, v.norm, common)
    } else {
        0.0
    })
}

fn finish_score(norm_u: f64, norm_v: f64, common: f64) -> f64 {
    (1.0 - (0.5 * (norm_u + norm_v) - common)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryResult {
    pub entry_id: u32,
    pub score: f64,
}

#[derive(Debug)]
enum DescriptorSlot {
    None,
    Loaded(Arc<DescriptorSet>),
    Deferred {
        path: Arc<PathBuf>,
        offset: u64,
        cell: OnceLock<Arc<DescriptorSet>>,
    },
}

#[derive(Debug)]
pub struct DbEntry {
    pub bow: BowVector,
    pub fv: FeatureVector,
    descriptors: DescriptorSlot,
}

impl DbEntry {
    pub fn has_descriptors(&self) -> bool {
        !matches!(self.descriptors, DescriptorSlot::None)
    }
}

/// Inverted-file database. Adds take `&mut self` and queries `&self`, so any
/// number of queries may run concurrently between adds.
#[derive(Debug)]
pub struct ImageDatabase {
    fingerprint: [u8; 32],
    word_count: usize,
    node_count: usize,
    entries: Vec<DbEntry>,
    inverted: Vec<Vec<(u32, f32)>>,
}

impl ImageDatabase {
    pub fn new(vocab: &Vocabulary) -> Self {
        Self {
            fingerprint: vocab.fingerprint(),
            word_count: vocab.word_count(),
            node_count: vocab.nodes().len(),
            entries: Vec::new(),
            inverted: vec![Vec::new(); vocab.word_count()],
        }
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: u32) -> Result<&DbEntry, IndexError> {
        self.entries.get(id as usize).ok_or(IndexError::UnknownEntry(id))
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    /// Postings of a word as `(entry_id, weight)`, sorted by entry id.
    pub fn postings(&self, word: u32) -> &[(u32, f32)] {
        self.inverted.get(word as usize).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Appends an entry and returns its id.
    pub fn add(
        &mut self,
        bow: BowVector,
        fv: FeatureVector,
        descriptors: Option<DescriptorSet>,
    ) -> Result<u32, IndexError> {
        self.validate_entry(&bow, &fv)?;
        let slot = match descriptors {
            Some(set) => DescriptorSlot::Loaded(Arc::new(set)),
            None => DescriptorSlot::None,
        };
        Ok(self.push_entry(bow, fv, slot))
    }

    fn validate_entry(&self, bow: &BowVector, fv: &FeatureVector) -> Result<(), IndexError> {
        bow.check_normalized()?;
        if let Some(&(word, _)) = bow.entries().iter().find(|e| e.0 as usize >= self.word_count) {
            return Err(IndexError::UnknownWord {
                word,
                word_count: self.word_count,
            });
        }
        if let Some((node, _)) = fv.iter().find(|(n, _)| *n as usize >= self.node_count) {
            return Err(IndexError::InvalidVector(format!(
                "direct-index node {node} outside the vocabulary"
            )));
        }
        Ok(())
    }

    fn push_entry(&mut self, bow: BowVector, fv: FeatureVector, descriptors: DescriptorSlot) -> u32 {
        let id = self.entries.len() as u32;
        for &(w, x) in bow.entries() {
            self.inverted[w as usize].push((id, x));
        }
        self.entries.push(DbEntry { bow, fv, descriptors });
        id
    }

    /// Ranks entries sharing at least one word with `bow` by [`l1_score`],
    /// best first with ties by ascending id, skipping ids in `exclude`.
    pub fn query(
        &self,
        bow: &BowVector,
        max_results: usize,
        exclude: Option<Range<u32>>,
    ) -> Result<Vec<QueryResult>, IndexError> {
        bow.check_normalized()?;
        let mut acc = vec![0.0f64; self.entries.len()];
        let mut hit = vec![false; self.entries.len()];
        let mut touched = Vec::new();
        for &(w, x) in bow.entries() {
            for &(e, y) in self.postings(w) {
                let e = e as usize;
                if !hit[e] {
                    hit[e] = true;
                    touched.push(e as u32);
                }
                acc[e] += x.min(y) as f64;
            }
        }
        let mut results: Vec<QueryResult> = touched
            .into_iter()
            .filter(|e| !exclude.as_ref().is_some_and(|r| r.contains(e)))
            .map(|e| QueryResult {
                entry_id: e,
                score: finish_score(bow.norm, self.entries[e as usize].bow.norm, acc[e as usize]),
            })
            .collect();
        results.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entry_id.cmp(&b.entry_id)));
        results.truncate(max_results);
        Ok(results)
    }

    /// Descriptor set stored with an entry, reading it from disk on first use
    /// for databases opened with [`ImageDatabase::load`].
    pub fn descriptors(&self, id: u32) -> Result<Option<Arc<DescriptorSet>>, IndexError> {
        match &self.entry(id)?.descriptors {
            DescriptorSlot::None => Ok(None),
            DescriptorSlot::Loaded(set) => Ok(Some(set.clone())),
            DescriptorSlot::Deferred { path, offset, cell } => {
                if let Some(set) = cell.get() {
                    return Ok(Some(set.clone()));
                }
                let mut file = BufReader::new(File::open(path.as_ref()).map_err(FormatError::from)?);
                file.seek(SeekFrom::Start(*offset)).map_err(FormatError::from)?;
                let set = Arc::new(read_descriptor_set_from(&mut file)?);
                Ok(Some(cell.get_or_init(|| set).clone()))
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, IndexError> {
        self.encode(true)
    }

    /// IDB1 image with every blob offset set to "none", for containers that
    /// store the descriptor sets themselves.
    pub fn to_bytes_without_descriptors(&self) -> Result<Vec<u8>, IndexError> {
        self.encode(false)
    }

    /// Replaces the descriptor set stored with an entry.
    pub fn attach_descriptors(&mut self, id: u32, set: Arc<DescriptorSet>) -> Result<(), IndexError> {
        let entry = self.entries.get_mut(id as usize).ok_or(IndexError::UnknownEntry(id))?;
        entry.descriptors = DescriptorSlot::Loaded(set);
        Ok(())
    }

    fn encode(&self, with_descriptors: bool) -> Result<Vec<u8>, IndexError> {
        let mut out = Vec::new();
        let mut blobs = Vec::new();
        out.extend_from_slice(IDB_MAGIC);
        out.extend_from_slice(&self.fingerprint);
        put_u32(&mut out, count_u32(self.entries.len(), "entry")?);
        for (id, e) in self.entries.iter().enumerate() {
            put_u32(&mut out, count_u32(e.bow.len(), "word")?);
            for &(w, x) in e.bow.entries() {
                put_u32(&mut out, w);
                put_f32(&mut out, x);
            }
            put_u32(&mut out, count_u32(e.fv.len(), "node")?);
            for (node, feats) in e.fv.iter() {
                put_u32(&mut out, node);
                put_u32(&mut out, count_u32(feats.len(), "feature")?);
                feats.iter().for_each(|f| put_u32(&mut out, *f));
            }
            match self.descriptors(id as u32)?.filter(|_| with_descriptors) {
                Some(set) => {
                    put_u64(&mut out, blobs.len() as u64);
                    encode_descriptor_set(&set, &mut blobs)?;
                }
                None => put_u64(&mut out, NO_BLOB),
            }
        }
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        Ok(write_file(path.as_ref(), &self.to_bytes()?)?)
    }

    /// Decodes a complete in-memory IDB1 image, descriptor blobs included.
    pub fn from_bytes(bytes: &[u8], vocab: &Vocabulary) -> Result<Self, IndexError> {
        let (mut db, blob_start, offsets) = Self::read_index(StreamReader::new(bytes), vocab)?;
        let mut end = blob_start;
        for (id, off) in offsets.into_iter().enumerate() {
            if let Some(off) = off {
                let start = blob_start + off as usize;
                let mut r = ByteReader::at(bytes, start);
                let set = decode_descriptor_set(&mut r)?;
                end = end.max(r.pos());
                db.entries[id].descriptors = DescriptorSlot::Loaded(Arc::new(set));
            }
        }
        if end < bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - end).into());
        }
        Ok(db)
    }

    /// Opens a database file, reading the index eagerly and descriptor blobs
    /// on demand.
    pub fn load(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(FormatError::from)?;
        let file_len = file.metadata().map_err(FormatError::from)?.len();
        let (mut db, blob_start, offsets) = Self::read_index(StreamReader::new(BufReader::new(file)), vocab)?;
        let shared = Arc::new(path.to_path_buf());
        for (id, off) in offsets.into_iter().enumerate() {
            if let Some(off) = off {
                let offset = blob_start as u64 + off;
                if offset >= file_len {
                    return Err(FormatError::invalid(
                        blob_start,
                        format!("entry {id} blob offset {off} beyond end of file"),
                    )
                    .into());
                }
                db.entries[id].descriptors = DescriptorSlot::Deferred {
                    path: shared.clone(),
                    offset,
                    cell: OnceLock::new(),
                };
            }
        }
        Ok(db)
    }

    #[allow(clippy::type_complexity)]
    fn read_index<R: std::io::Read>(
        mut r: StreamReader<R>,
        vocab: &Vocabulary,
    ) -> Result<(Self, usize, Vec<Option<u64>>), IndexError> {
        r.magic(IDB_MAGIC)?;
        let hash: [u8; 32] = r.array()?;
        if hash != vocab.fingerprint() {
            return Err(IndexError::FingerprintMismatch);
        }
        let mut db = Self::new(vocab);
        let count = r.u32()?;
        let mut offsets = Vec::new();
        for _ in 0..count {
            let entry_offset = r.pos();
            let n = r.u32()?;
            let mut words = Vec::new();
            for _ in 0..n {
                words.push((r.u32()?, r.f32()?));
            }
            let bow =
                BowVector::from_normalized(words).map_err(|e| FormatError::invalid(entry_offset, e.to_string()))?;
            let n = r.u32()?;
            let mut fv = FeatureVector::new();
            let mut prev = None;
            for _ in 0..n {
                let node_offset = r.pos();
                let node = r.u32()?;
                if prev.is_some_and(|p| p >= node) {
                    return Err(FormatError::invalid(node_offset, "direct-index nodes out of order").into());
                }
                prev = Some(node);
                let m = r.u32()?;
                for _ in 0..m {
                    fv.push(node, r.u32()?);
                }
            }
            let blob = r.u64()?;
            db.validate_entry(&bow, &fv)
                .map_err(|e| FormatError::invalid(entry_offset, e.to_string()))?;
            db.push_entry(bow, fv, DescriptorSlot::None);
            offsets.push((blob != NO_BLOB).then_some(blob));
        }
        Ok((db, r.pos(), offsets))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{Descriptor, Signature};
    use crate::rng::XorShift64Star;
    use crate::vocab::{assign_idf, build_vocabulary, TrainingPool};
    use proptest::prelude::*;

    fn bow(pairs: &[(u32, f32)]) -> BowVector {
        BowVector::from_normalized(pairs.to_vec()).unwrap()
    }

    /// Direct evaluation of `1 - 0.5 * sum |u - v|` over the union of words.
    fn union_oracle(u: &BowVector, v: &BowVector) -> f64 {
        let mut words: Vec<u32> = u.entries().iter().chain(v.entries()).map(|e| e.0).collect();
        words.sort();
        words.dedup();
        let diff: f64 = words
            .iter()
            .map(|w| (u.get(*w).unwrap_or(0.0) as f64 - v.get(*w).unwrap_or(0.0) as f64).abs())
            .sum();
        1.0 - 0.5 * diff
    }

    fn random_vocab(seed: u64) -> (Vocabulary, Vec<DescriptorSet>) {
        let mut rng = XorShift64Star::new(seed);
        let sig = Signature::float(4).unwrap();
        let sets: Vec<DescriptorSet> = (0..12)
            .map(|_| {
                let n = 5 + rng.below(20);
                DescriptorSet::new(
                    sig,
                    (0..n)
                        .map(|_| Descriptor::Float((0..4).map(|_| rng.normal() as f32).collect()))
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let mut pool = TrainingPool::new(sig);
        for s in &sets {
            pool.add_image(s.clone()).unwrap();
        }
        let v = build_vocabulary(&pool, 3, 3, seed).unwrap();
        (assign_idf(&v, &sets).unwrap(), sets)
    }

    #[test]
    fn score_examples() {
        let u = bow(&[(1, 1.0)]);
        let v = bow(&[(1, 0.5), (2, 0.5)]);
        assert_eq!(l1_score(&u, &v).unwrap(), 0.5);
        assert_eq!(union_oracle(&u, &v), 0.5);
        assert_eq!(l1_score(&v, &v).unwrap(), 1.0);
        assert_eq!(l1_score(&u, &bow(&[(3, 1.0)])).unwrap(), 0.0);
        assert_eq!(l1_score(&BowVector::default(), &u).unwrap(), 0.0);
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        assert!(matches!(
            BowVector::from_normalized(vec![(0, 0.4)]),
            Err(IndexError::NotNormalized(_))
        ));
        assert!(BowVector::from_normalized(vec![(2, 0.5), (1, 0.5)]).is_err());
        assert!(BowVector::from_normalized(vec![(1, 0.0), (2, 1.0)]).is_err());
        let raw = BowVector::from_sorted(vec![(0, 2.0)]);
        assert!(matches!(l1_score(&raw, &raw), Err(IndexError::NotNormalized(_))));
    }

    #[test]
    fn from_weights_merges_and_normalizes() {
        let b = BowVector::from_weights(vec![(5, 1.0), (2, 1.0), (5, 2.0), (7, 0.0)]).unwrap();
        assert_eq!(b.entries(), &[(2, 0.25), (5, 0.75)]);
        assert!(BowVector::from_weights(vec![(0, 0.0)]).unwrap().is_empty());
        assert!(BowVector::from_weights(vec![(0, -1.0)]).is_err());
    }

    #[test]
    fn transform_examples() {
        let (v, _) = random_vocab(1);
        let sig = v.signature();
        let leaf_word = (0..v.word_count() as u32).find(|w| v.word_weight(*w) > 0.0).unwrap();
        let center = v.node(v.word_node(leaf_word)).center.clone();
        let set = DescriptorSet::new(sig, vec![center.clone(); 4]).unwrap();
        let (b, fv) = transform(&v, &set, 0).unwrap();
        assert_eq!(b.entries(), &[(leaf_word, 1.0)]);
        assert_eq!(fv.get(v.word_node(leaf_word)).unwrap(), &[0, 1, 2, 3]);

        let (b, fv) = transform(&v, &DescriptorSet::empty(sig), 2).unwrap();
        assert!(b.is_empty() && fv.is_empty());

        // Two words with equal IDF.
        let mut by_weight: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for w in 0..v.word_count() as u32 {
            if v.word_weight(w) > 0.0 {
                by_weight.entry(v.word_weight(w).to_bits()).or_default().push(w);
            }
        }
        let pair = by_weight.values().find(|ws| ws.len() >= 2).unwrap();
        let set = DescriptorSet::new(
            sig,
            vec![
                v.node(v.word_node(pair[0])).center.clone(),
                v.node(v.word_node(pair[1])).center.clone(),
            ],
        )
        .unwrap();
        let (b, _) = transform(&v, &set, 1).unwrap();
        assert_eq!(b.entries(), &[(pair[0], 0.5), (pair[1], 0.5)]);

        assert!(matches!(transform(&v, &set, 4), Err(IndexError::InvalidLevels { .. })));
        let other = DescriptorSet::empty(Signature::float(3).unwrap());
        assert!(transform(&v, &other, 0).is_err());
    }

    #[test]
    fn direct_index_uses_ancestors() {
        let (v, sets) = random_vocab(2);
        for di in 0..=3 {
            let (_, fv) = transform(&v, &sets[0], di).unwrap();
            let mut all: Vec<u32> = fv.iter().flat_map(|(_, f)| f.iter().copied()).collect();
            all.sort();
            assert_eq!(all, (0..sets[0].len() as u32).collect::<Vec<_>>());
            for (node, feats) in fv.iter() {
                for &f in feats {
                    let q = v.quantize(&sets[0].descriptors()[f as usize]).unwrap();
                    let expected = if di >= q.path.len() {
                        0
                    } else {
                        q.path[q.path.len() - 1 - di]
                    };
                    assert_eq!(node, expected);
                }
            }
        }
    }

    #[test]
    fn database_basics() {
        let (v, sets) = random_vocab(3);
        let mut db = ImageDatabase::new(&v);
        assert!(db.query(&bow(&[(0, 1.0)]), 10, None).unwrap().is_empty());
        let mut bows = Vec::new();
        for (i, s) in sets.iter().enumerate() {
            let (b, fv) = transform(&v, s, 2).unwrap();
            bows.push(b.clone());
            assert_eq!(db.add(b, fv, Some(s.clone())).unwrap(), i as u32);
        }
        for w in 0..v.word_count() as u32 {
            assert!(db.postings(w).windows(2).all(|p| p[0].0 < p[1].0));
        }
        for (i, b) in bows.iter().enumerate() {
            if b.is_empty() {
                continue;
            }
            let r = db.query(b, 1, None).unwrap();
            assert_eq!(
                r[0],
                QueryResult {
                    entry_id: i as u32,
                    score: 1.0
                }
            );
            let r = db.query(b, 100, Some(i as u32..i as u32 + 1)).unwrap();
            assert!(r.iter().all(|q| q.entry_id != i as u32));
        }
        assert!(matches!(
            db.add(bow(&[(v.word_count() as u32, 1.0)]), FeatureVector::new(), None),
            Err(IndexError::UnknownWord { .. })
        ));
    }

    #[test]
    fn three_entry_ranking_matches_exhaustive_scoring() {
        let (v, _) = random_vocab(4);
        let mut db = ImageDatabase::new(&v);
        let entries = [bow(&[(0, 0.5), (1, 0.5)]), bow(&[(1, 1.0)]), bow(&[(0, 0.5), (2, 0.5)])];
        for e in &entries {
            db.add(e.clone(), FeatureVector::new(), None).unwrap();
        }
        let q = bow(&[(0, 0.5), (1, 0.25), (2, 0.25)]);
        let mut oracle: Vec<(u32, f64)> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i as u32, union_oracle(&q, e)))
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got = db.query(&q, 3, None).unwrap();
        assert_eq!(
            got.iter().map(|r| r.entry_id).collect::<Vec<_>>(),
            oracle.iter().map(|o| o.0).collect::<Vec<_>>()
        );
        for (g, o) in got.iter().zip(&oracle) {
            assert!((g.score - o.1).abs() < 1e-12);
        }
        // Entries 0 and 2 tie at 0.75; the lower id ranks first.
        assert_eq!(got[0].entry_id, 0);
        assert_eq!(got[0].score, got[1].score);
    }

    #[test]
    fn file_round_trip_and_lazy_loading() {
        let (v, sets) = random_vocab(5);
        let mut db = ImageDatabase::new(&v);
        for (i, s) in sets.iter().enumerate() {
            let (b, fv) = transform(&v, s, 2).unwrap();
            db.add(b, fv, (i % 3 != 1).then(|| s.clone())).unwrap();
        }
        let bytes = db.to_bytes().unwrap();
        let eager = ImageDatabase::from_bytes(&bytes, &v).unwrap();
        assert_eq!(eager.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.idb");
        db.save(&path).unwrap();
        let lazy = ImageDatabase::load(&path, &v).unwrap();
        for (i, s) in sets.iter().enumerate() {
            let got = lazy.descriptors(i as u32).unwrap();
            if i % 3 == 1 {
                assert!(got.is_none());
            } else {
                assert!(got.unwrap().bit_eq(s));
            }
            assert_eq!(lazy.entry(i as u32).unwrap().bow, db.entry(i as u32).unwrap().bow);
            assert_eq!(lazy.entry(i as u32).unwrap().fv, db.entry(i as u32).unwrap().fv);
        }
        assert_eq!(lazy.to_bytes().unwrap(), bytes);

        let (other, _) = random_vocab(6);
        assert!(matches!(
            ImageDatabase::load(&path, &other),
            Err(IndexError::FingerprintMismatch)
        ));
        assert!(matches!(
            ImageDatabase::from_bytes(&bytes, &other),
            Err(IndexError::FingerprintMismatch)
        ));
        let mut bad = bytes.clone();
        bad[0] = b'J';
        assert!(matches!(
            ImageDatabase::from_bytes(&bad, &v),
            Err(IndexError::Format(FormatError::BadMagic { offset: 0, .. }))
        ));
        assert!(ImageDatabase::from_bytes(&bytes[..bytes.len() - 5], &v).is_err());
    }

    fn arb_bow(words: u32) -> impl Strategy<Value = BowVector> {
        prop::collection::btree_map(0..words, 1u32..100, 0..8)
            .prop_map(|m| BowVector::from_weights(m.into_iter().map(|(w, x)| (w, x as f64)).collect()).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn inverted_file_equals_brute_force(
            entries in prop::collection::vec(arb_bow(12), 0..15),
            q in arb_bow(12),
            max in 1usize..20,
            ex in prop::option::of((0u32..15, 0u32..5)),
        ) {
            let (v, _) = random_vocab(7);
            prop_assume!(v.word_count() >= 12);
            let mut db = ImageDatabase::new(&v);
            for e in &entries {
                db.add(e.clone(), FeatureVector::new(), None).unwrap();
            }
            let exclude = ex.map(|(a, n)| a..a + n);
            let mut brute: Vec<QueryResult> = Vec::new();
            for (i, e) in entries.iter().enumerate() {
                let shares = e.entries().iter().any(|w| q.get(w.0).is_some());
                if !shares || exclude.as_ref().is_some_and(|r| r.contains(&(i as u32))) {
                    continue;
                }
                brute.push(QueryResult { entry_id: i as u32, score: l1_score(&q, e).unwrap() });
            }
            brute.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entry_id.cmp(&b.entry_id)));
            brute.truncate(max);
            prop_assert_eq!(db.query(&q, max, exclude).unwrap(), brute);
        }

        #[test]
        fn score_agrees_with_union_form(u in arb_bow(10), v in arb_bow(10)) {
            let s = l1_score(&u, &v).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, l1_score(&v, &u).unwrap());
            if !u.is_empty() && !v.is_empty() {
                prop_assert!((s - union_oracle(&u, &v)).abs() < 1e-6);
            }
            if !u.is_empty() {
                prop_assert_eq!(l1_score(&u, &u).unwrap(), 1.0);
            }
        }
    }
}
