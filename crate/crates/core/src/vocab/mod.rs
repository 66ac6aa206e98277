//! Hierarchical vocabulary tree: training, IDF weighting, quantization and
//! the `.voc` (VOC1) file format.
//!
//! VOC1 layout, little-endian:
//!
//! ```text
//! "VOC1" | dtype u8 | dim u16 | k u32 | L u32 | node_count u32
//! | node_count x (parent u32 (root 0xFFFFFFFF) | is_leaf u8 | weight f32 | center row)
//! ```
//!
//! Nodes are stored breadth-first; children of a node are the nodes whose
//! `parent` names it, in file order. Word ids follow leaf order.

mod kmeans;

use std::path::Path;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::descriptor::{cluster_cost, Descriptor, DescriptorError, DescriptorSet, Signature};
use crate::format::{count_u32, put_f32, put_u16, put_u32, read_file, write_file, ByteReader, FormatError};
use crate::io::{decode_row, put_row};
use crate::rng::derive_seed;

pub use kmeans::{kmeans, KMeansResult, DEFAULT_MAX_ITERS};

pub const VOC_MAGIC: &[u8; 4] = b"VOC1";
pub const DEFAULT_K: usize = 10;
pub const DEFAULT_LEVELS: usize = 5;
const NO_PARENT: u32 = u32::MAX;
const VOC_HEADER_LEN: usize = 4 + 1 + 2 + 4 + 4 + 4;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("branching factor must be at least 1")]
    ZeroK,
    #[error("no descriptors to cluster")]
    EmptyInput,
    #[error("invalid vocabulary shape: {0}")]
    InvalidShape(String),
    #[error("match {pair} references index {index} but frame {frame} has {len} features")]
    MatchOutOfRange {
        pair: usize,
        frame: char,
        index: u32,
        len: usize,
    },
    #[error("IDF weighting needs at least one image")]
    NoImages,
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// One node of the tree. Ids are positions in breadth-first order; the root
/// is node 0 and carries an all-zero center that is never compared against.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabNode {
    pub id: u32,
    pub parent: Option<u32>,
    pub children: Vec<u32>,
    pub center: Descriptor,
    pub weight: f32,
    pub word_id: Option<u32>,
    pub depth: u32,
}

impl VocabNode {
    pub fn is_leaf(&self) -> bool {
        self.word_id.is_some()
    }
}

/// Result of descending the tree with one descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub word_id: u32,
    pub weight: f32,
    /// Visited node ids below the root, ending with the leaf.
    pub path: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    k: usize,
    levels: usize,
    signature: Signature,
    nodes: Vec<VocabNode>,
    words: Vec<u32>,
    fingerprint: OnceLock<[u8; 32]>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.levels == other.levels
            && self.signature == other.signature
            && self.nodes == other.nodes
    }
}

impl Vocabulary {
    fn from_nodes(k: usize, levels: usize, signature: Signature, mut nodes: Vec<VocabNode>) -> Self {
        let mut words = Vec::new();
        for node in nodes.iter_mut() {
            if node.children.is_empty() && node.id != 0 {
                node.word_id = Some(words.len() as u32);
                words.push(node.id);
            } else {
                node.word_id = None;
            }
        }
        Self {
            k,
            levels,
            signature,
            nodes,
            words,
            fingerprint: OnceLock::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn signature(&self) -> Signature {
        self.signature
    }

    pub fn nodes(&self) -> &[VocabNode] {
        &self.nodes
    }

    pub fn node(&self, id: u32) -> &VocabNode {
        &self.nodes[id as usize]
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    /// Node id of a word's leaf.
    pub fn word_node(&self, word_id: u32) -> u32 {
        self.words[word_id as usize]
    }

    pub fn word_weight(&self, word_id: u32) -> f32 {
        self.nodes[self.words[word_id as usize] as usize].weight
    }

    /// Greedy descent: at each internal node the nearest child under the
    /// descriptor's metric wins, ties going to the lowest child id. The
    /// result is not necessarily the globally nearest leaf.
    pub fn quantize(&self, d: &Descriptor) -> Result<Quantized, VocabError> {
        self.signature.check(d)?;
        let mut path = Vec::with_capacity(self.levels);
        let mut node = 0u32;
        while !self.nodes[node as usize].children.is_empty() {
            node = self.nearest_child(node, d);
            path.push(node);
        }
        let leaf = &self.nodes[node as usize];
        Ok(Quantized {
            word_id: leaf.word_id.expect("descent ends at a leaf"),
            weight: leaf.weight,
            path,
        })
    }

    /// Leaf node reached by `d`; the caller has already checked the signature.
    pub(crate) fn descend(&self, d: &Descriptor) -> u32 {
        let mut node = 0u32;
        while !self.nodes[node as usize].children.is_empty() {
            node = self.nearest_child(node, d);
        }
        node
    }

    /// Ancestor `levels_up` steps above `node`, stopping at the root.
    pub(crate) fn ancestor(&self, mut node: u32, levels_up: usize) -> u32 {
        for _ in 0..levels_up {
            match self.nodes[node as usize].parent {
                Some(p) => node = p,
                None => break,
            }
        }
        node
    }

    fn nearest_child(&self, node: u32, d: &Descriptor) -> u32 {
        let mut best = 0;
        let mut best_cost = f64::INFINITY;
        for &c in &self.nodes[node as usize].children {
            let cost = cluster_cost(d, &self.nodes[c as usize].center);
            if cost < best_cost {
                best = c;
                best_cost = cost;
            }
        }
        best
    }

    /// SHA-256 of the serialized vocabulary.
    pub fn fingerprint(&self) -> [u8; 32] {
        *self.fingerprint.get_or_init(|| {
            let bytes = self.to_bytes().expect("in-memory vocabulary serializes");
            Sha256::digest(&bytes).into()
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::with_capacity(VOC_HEADER_LEN + self.nodes.len() * (9 + self.signature.row_bytes()));
        out.extend_from_slice(VOC_MAGIC);
        out.push(self.signature.kind.code());
        put_u16(&mut out, self.signature.dim);
        put_u32(&mut out, count_u32(self.k, "branching")?);
        put_u32(&mut out, count_u32(self.levels, "level")?);
        put_u32(&mut out, count_u32(self.nodes.len(), "node")?);
        for n in &self.nodes {
            put_u32(&mut out, n.parent.unwrap_or(NO_PARENT));
            out.push(n.is_leaf() as u8);
            put_f32(&mut out, n.weight);
            put_row(&mut out, &n.center);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(VOC_MAGIC)?;
        let kind_offset = r.pos();
        let code = r.u8()?;
        let kind = crate::descriptor::DescriptorKind::from_code(code)
            .ok_or_else(|| FormatError::invalid(kind_offset, format!("unknown dtype {code}")))?;
        let dim_offset = r.pos();
        let dim = r.u16()?;
        let signature =
            Signature::new(kind, dim as usize).map_err(|e| FormatError::invalid(dim_offset, e.to_string()))?;
        let k_offset = r.pos();
        let k = r.u32()? as usize;
        let levels = r.u32()? as usize;
        if k == 0 || levels == 0 {
            return Err(FormatError::invalid(k_offset, "k and L must be positive"));
        }
        let count_offset = r.pos();
        let node_count = r.u32()? as usize;
        if node_count == 0 {
            return Err(FormatError::invalid(count_offset, "vocabulary has no nodes"));
        }
        let record = 4 + 1 + 4 + signature.row_bytes();
        let available = r.remaining() / record;
        if available < node_count {
            return Err(FormatError::NodeCount {
                expected: node_count,
                actual: available,
            });
        }

        let mut nodes: Vec<VocabNode> = Vec::with_capacity(node_count);
        let mut leaf_flags = Vec::with_capacity(node_count);
        for id in 0..node_count {
            let offset = r.pos();
            let parent = r.u32()?;
            let is_leaf = r.u8()?;
            let weight = r.f32()?;
            let center = decode_row(r.take(signature.row_bytes())?, kind);
            if is_leaf > 1 {
                return Err(FormatError::invalid(offset + 4, format!("bad leaf flag {is_leaf}")));
            }
            if !weight.is_finite() || weight < 0.0 {
                return Err(FormatError::invalid(offset + 5, format!("bad node weight {weight}")));
            }
            let (parent, depth) = if id == 0 {
                if parent != NO_PARENT {
                    return Err(FormatError::invalid(offset, "root must have no parent"));
                }
                (None, 0)
            } else {
                let p = parent as usize;
                // Breadth-first order: parents precede children and appear in
                // non-decreasing order.
                let prev = nodes[id - 1].parent.unwrap_or(0) as usize;
                if parent == NO_PARENT || p >= id || p < prev {
                    return Err(FormatError::invalid(
                        offset,
                        format!("node {id} has bad parent {parent}"),
                    ));
                }
                if leaf_flags[p] {
                    return Err(FormatError::invalid(offset, format!("leaf {p} has children")));
                }
                nodes[p].children.push(id as u32);
                if nodes[p].children.len() > k {
                    return Err(FormatError::invalid(offset, format!("node {p} exceeds {k} children")));
                }
                let depth = nodes[p].depth + 1;
                if depth as usize > levels {
                    return Err(FormatError::invalid(
                        offset,
                        format!("node {id} deeper than {levels} levels"),
                    ));
                }
                (Some(parent), depth)
            };
            leaf_flags.push(is_leaf == 1);
            nodes.push(VocabNode {
                id: id as u32,
                parent,
                children: Vec::new(),
                center,
                weight,
                word_id: None,
                depth,
            });
        }
        r.finish()?;
        for (n, &leaf) in nodes.iter().zip(&leaf_flags) {
            if n.id == 0 && leaf {
                return Err(FormatError::invalid(VOC_HEADER_LEN, "root cannot be a leaf"));
            }
            if !leaf && n.children.is_empty() {
                return Err(FormatError::invalid(
                    VOC_HEADER_LEN,
                    format!("internal node {} has no children", n.id),
                ));
            }
        }
        Ok(Self::from_nodes(k, levels, signature, nodes))
    }
}

/// Descriptors collected for training, one set per contributing image.
#[derive(Debug, Clone)]
pub struct TrainingPool {
    signature: Signature,
    images: Vec<DescriptorSet>,
    pairs_consumed: usize,
}

impl TrainingPool {
    pub fn new(signature: Signature) -> Self {
        Self {
            signature,
            images: Vec::new(),
            pairs_consumed: 0,
        }
    }

    pub fn signature(&self) -> Signature {
        self.signature
    }

    pub fn add_image(&mut self, set: DescriptorSet) -> Result<(), VocabError> {
        self.signature.check_same(set.signature())?;
        self.images.push(set);
        Ok(())
    }

    /// Keeps only frame A's features that take part in a match with frame B.
    pub fn add_pair(
        &mut self,
        frame_a: &DescriptorSet,
        frame_b: &DescriptorSet,
        matches: &[(u32, u32)],
    ) -> Result<(), VocabError> {
        let set = filter_matched_features(frame_a, frame_b, matches)?;
        self.add_image(set)?;
        self.pairs_consumed += 1;
        Ok(())
    }

    pub fn images(&self) -> &[DescriptorSet] {
        &self.images
    }

    pub fn pairs_consumed(&self) -> usize {
        self.pairs_consumed
    }

    pub fn descriptor_count(&self) -> usize {
        self.images.iter().map(|s| s.len()).sum()
    }
}

/// Descriptors of `frame_a` named by the match list, one per pair, in order.
pub fn filter_matched_features(
    frame_a: &DescriptorSet,
    frame_b: &DescriptorSet,
    matches: &[(u32, u32)],
) -> Result<DescriptorSet, VocabError> {
    let mut picked = Vec::with_capacity(matches.len());
    for (pair, &(a, b)) in matches.iter().enumerate() {
        if a as usize >= frame_a.len() {
            return Err(VocabError::MatchOutOfRange {
                pair,
                frame: 'a',
                index: a,
                len: frame_a.len(),
            });
        }
        if b as usize >= frame_b.len() {
            return Err(VocabError::MatchOutOfRange {
                pair,
                frame: 'b',
                index: b,
                len: frame_b.len(),
            });
        }
        picked.push(a as usize);
    }
    Ok(frame_a.select(&picked)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainParams {
    pub k: usize,
    pub levels: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            levels: DEFAULT_LEVELS,
            seed: 0,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

pub fn build_vocabulary(pool: &TrainingPool, k: usize, levels: usize, seed: u64) -> Result<Vocabulary, VocabError> {
    build_vocabulary_with(
        pool,
        &TrainParams {
            k,
            levels,
            seed,
            ..TrainParams::default()
        },
    )
}

/// Top-down clustering. Node `n` is clustered with seed
/// `derive_seed(seed, n)`. A node stops splitting at depth `levels`, when it
/// holds at most one descriptor, or when all of its descriptors coincide.
/// Leaves start with weight 1 until [`assign_idf`] runs.
pub fn build_vocabulary_with(pool: &TrainingPool, params: &TrainParams) -> Result<Vocabulary, VocabError> {
    if params.k < 2 {
        return Err(VocabError::InvalidShape(format!("k = {} (need at least 2)", params.k)));
    }
    if params.levels == 0 {
        return Err(VocabError::InvalidShape("L = 0 (need at least 1)".into()));
    }
    let sig = pool.signature();
    let all: Vec<&Descriptor> = pool.images().iter().flat_map(|s| s.descriptors()).collect();
    if all.is_empty() {
        return Err(VocabError::EmptyInput);
    }

    let mut nodes = vec![VocabNode {
        id: 0,
        parent: None,
        children: Vec::new(),
        center: sig.zero(),
        weight: 0.0,
        word_id: None,
        depth: 0,
    }];
    let mut members: Vec<Vec<&Descriptor>> = vec![all];
    let mut next = 0;
    while next < nodes.len() {
        let id = next;
        next += 1;
        let group = std::mem::take(&mut members[id]);
        let depth = nodes[id].depth as usize;
        if id != 0 && (depth >= params.levels || group.len() <= 1) {
            continue;
        }
        let result = kmeans::kmeans_refs(&group, params.k, derive_seed(params.seed, id as u64), params.max_iters)?;
        if id != 0 && result.centers.len() < 2 {
            continue;
        }
        let mut buckets: Vec<Vec<&Descriptor>> = vec![Vec::new(); result.centers.len()];
        for (d, &a) in group.iter().zip(&result.assignments) {
            buckets[a].push(d);
        }
        for (center, bucket) in result.centers.into_iter().zip(buckets) {
            if bucket.is_empty() {
                continue;
            }
            let child = nodes.len() as u32;
            nodes[id].children.push(child);
            nodes.push(VocabNode {
                id: child,
                parent: Some(id as u32),
                children: Vec::new(),
                center,
                weight: 1.0,
                word_id: None,
                depth: depth as u32 + 1,
            });
            members.push(bucket);
        }
    }
    Ok(Vocabulary::from_nodes(params.k, params.levels, sig, nodes))
}

/// Sets every leaf weight to `ln(N / n_i)`, `n_i` being the number of the
/// `N` images with at least one descriptor quantized to word `i`; unseen
/// words get 0.
pub fn assign_idf(vocab: &Vocabulary, images: &[DescriptorSet]) -> Result<Vocabulary, VocabError> {
    if images.is_empty() {
        return Err(VocabError::NoImages);
    }
    let mut counts = vec![0u32; vocab.word_count()];
    let mut seen_in = vec![usize::MAX; vocab.word_count()];
    for (img, set) in images.iter().enumerate() {
        vocab.signature.check_same(set.signature())?;
        for d in set.descriptors() {
            let leaf = vocab.descend(d);
            let w = vocab.nodes[leaf as usize].word_id.unwrap() as usize;
            if seen_in[w] != img {
                seen_in[w] = img;
                counts[w] += 1;
            }
        }
    }
    let n = images.len() as f64;
    let mut out = vocab.clone();
    out.fingerprint = OnceLock::new();
    for (w, &c) in counts.iter().enumerate() {
        let node = out.words[w] as usize;
        out.nodes[node].weight = if c == 0 { 0.0 } else { (n / c as f64).ln() as f32 };
    }
    Ok(out)
}

pub fn save_vocabulary(vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<(), VocabError> {
    Ok(write_file(path.as_ref(), &vocab.to_bytes()?)?)
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary, VocabError> {
    Ok(Vocabulary::from_bytes(&read_file(path.as_ref())?)?)
}
