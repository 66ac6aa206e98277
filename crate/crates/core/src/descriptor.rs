//! Descriptor representations, distance metrics and centroid updates.
//!
//! Two descriptor families are supported: packed binary strings compared by
//! Hamming distance (ORB/BRIEF style) and `f32` vectors compared by Euclidean
//! distance (SuperPoint style). Float descriptors are used exactly as the
//! producer wrote them; nothing here re-normalizes.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DescriptorError {
    #[error("descriptor kind mismatch: expected {expected}, found {found}")]
    KindMismatch {
        expected: DescriptorKind,
        found: DescriptorKind,
    },
    #[error("descriptor dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid descriptor dimension {0} (must be in 1..=65535)")]
    InvalidDim(usize),
    #[error("non-finite value in float descriptor")]
    NonFinite,
    #[error("centroid of an empty descriptor set")]
    EmptySet,
    #[error("{what} has {found} entries but the set holds {expected} descriptors")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("feature index {index} out of range for a set of {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DescriptorKind {
    Binary,
    Float,
}

impl DescriptorKind {
    pub fn code(self) -> u8 {
        match self {
            DescriptorKind::Binary => 0,
            DescriptorKind::Float => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DescriptorKind::Binary),
            1 => Some(DescriptorKind::Float),
            _ => None,
        }
    }
}

impl fmt::Display for DescriptorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DescriptorKind::Binary => "binary",
            DescriptorKind::Float => "float",
        })
    }
}

/// Kind plus dimension. `dim` counts bytes for binary descriptors and `f32`
/// elements for float descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature {
    pub kind: DescriptorKind,
    pub dim: u16,
}

impl Signature {
    pub fn new(kind: DescriptorKind, dim: usize) -> Result<Self, DescriptorError> {
        if dim == 0 || dim > u16::MAX as usize {
            return Err(DescriptorError::InvalidDim(dim));
        }
        Ok(Self { kind, dim: dim as u16 })
    }

    pub fn binary(bytes: usize) -> Result<Self, DescriptorError> {
        Self::new(DescriptorKind::Binary, bytes)
    }

    pub fn float(dim: usize) -> Result<Self, DescriptorError> {
        Self::new(DescriptorKind::Float, dim)
    }

    /// Bytes one descriptor occupies in the on-disk row layout.
    pub fn row_bytes(&self) -> usize {
        match self.kind {
            DescriptorKind::Binary => self.dim as usize,
            DescriptorKind::Float => self.dim as usize * 4,
        }
    }

    pub fn zero(&self) -> Descriptor {
        match self.kind {
            DescriptorKind::Binary => Descriptor::Binary(vec![0; self.dim as usize]),
            DescriptorKind::Float => Descriptor::Float(vec![0.0; self.dim as usize]),
        }
    }

    pub fn check(&self, d: &Descriptor) -> Result<(), DescriptorError> {
        if d.kind() != self.kind {
            return Err(DescriptorError::KindMismatch {
                expected: self.kind,
                found: d.kind(),
            });
        }
        if d.dim() != self.dim as usize {
            return Err(DescriptorError::DimMismatch {
                expected: self.dim as usize,
                found: d.dim(),
            });
        }
        Ok(())
    }

    /// Errors unless `other` equals this signature.
    pub fn check_same(&self, other: Signature) -> Result<(), DescriptorError> {
        if other.kind != self.kind {
            return Err(DescriptorError::KindMismatch {
                expected: self.kind,
                found: other.kind,
            });
        }
        if other.dim != self.dim {
            return Err(DescriptorError::DimMismatch {
                expected: self.dim as usize,
                found: other.dim as usize,
            });
        }
        Ok(())
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kind, self.dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Descriptor {
    Binary(Vec<u8>),
    Float(Vec<f32>),
}

impl Descriptor {
    pub fn kind(&self) -> DescriptorKind {
        match self {
            Descriptor::Binary(_) => DescriptorKind::Binary,
            Descriptor::Float(_) => DescriptorKind::Float,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Descriptor::Binary(b) => b.len(),
            Descriptor::Float(v) => v.len(),
        }
    }

    pub fn signature(&self) -> Result<Signature, DescriptorError> {
        Signature::new(self.kind(), self.dim())
    }

    pub fn as_binary(&self) -> Option<&[u8]> {
        match self {
            Descriptor::Binary(b) => Some(b),
            Descriptor::Float(_) => None,
        }
    }

    pub fn as_float(&self) -> Option<&[f32]> {
        match self {
            Descriptor::Float(v) => Some(v),
            Descriptor::Binary(_) => None,
        }
    }

    /// Bit-level equality (float NaN payloads and signed zeros included).
    pub fn bit_eq(&self, other: &Descriptor) -> bool {
        match (self, other) {
            (Descriptor::Binary(a), Descriptor::Binary(b)) => a == b,
            (Descriptor::Float(a), Descriptor::Float(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

fn check_pair(a: &Descriptor, b: &Descriptor) -> Result<(), DescriptorError> {
    if a.kind() != b.kind() {
        return Err(DescriptorError::KindMismatch {
            expected: a.kind(),
            found: b.kind(),
        });
    }
    if a.dim() != b.dim() {
        return Err(DescriptorError::DimMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

/// Popcount of `a XOR b`, eight bytes at a time.
#[inline]
pub fn hamming_bytes(a: &[u8], b: &[u8]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    let mut total = 0u32;
    for (x, y) in (&mut ca).zip(&mut cb) {
        let x = u64::from_le_bytes(x.try_into().unwrap());
        let y = u64::from_le_bytes(y.try_into().unwrap());
        total += (x ^ y).count_ones();
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        total += (x ^ y).count_ones();
    }
    total
}

/// Squared Euclidean distance accumulated in `f64` in element order.
#[inline]
pub fn l2_squared(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc
}

pub fn hamming_distance(a: &Descriptor, b: &Descriptor) -> Result<u32, DescriptorError> {
    check_pair(a, b)?;
    match (a, b) {
        (Descriptor::Binary(x), Descriptor::Binary(y)) => Ok(hamming_bytes(x, y)),
        _ => Err(DescriptorError::KindMismatch {
            expected: DescriptorKind::Binary,
            found: DescriptorKind::Float,
        }),
    }
}

pub fn l2_distance(a: &Descriptor, b: &Descriptor) -> Result<f64, DescriptorError> {
    check_pair(a, b)?;
    match (a, b) {
        (Descriptor::Float(x), Descriptor::Float(y)) => {
            let d = l2_squared(x, y).sqrt();
            // Any NaN or infinity in the inputs surfaces in the sum.
            if d.is_finite() {
                Ok(d)
            } else {
                Err(DescriptorError::NonFinite)
            }
        }
        _ => Err(DescriptorError::KindMismatch {
            expected: DescriptorKind::Float,
            found: DescriptorKind::Binary,
        }),
    }
}

/// Distance under the metric native to the descriptor kind.
pub fn distance(a: &Descriptor, b: &Descriptor) -> Result<f64, DescriptorError> {
    match a.kind() {
        DescriptorKind::Binary => hamming_distance(a, b).map(f64::from),
        DescriptorKind::Float => l2_distance(a, b),
    }
}

/// Clustering cost between a point and a center: Hamming distance for binary
/// descriptors, squared L2 for float descriptors. These are the quantities
/// the majority-vote and arithmetic-mean center updates minimize.
///
/// Callers guarantee matching signatures.
#[inline]
pub(crate) fn cluster_cost(a: &Descriptor, b: &Descriptor) -> f64 {
    match (a, b) {
        (Descriptor::Binary(x), Descriptor::Binary(y)) => hamming_bytes(x, y) as f64,
        (Descriptor::Float(x), Descriptor::Float(y)) => l2_squared(x, y),
        _ => f64::INFINITY,
    }
}

/// Center of a descriptor group.
///
/// Float: elementwise arithmetic mean. Binary: bitwise majority; a bit is set
/// only when strictly more than half of the members set it, so a tie clears it.
pub fn centroid(set: &[Descriptor]) -> Result<Descriptor, DescriptorError> {
    let refs: Vec<&Descriptor> = set.iter().collect();
    centroid_of(&refs)
}

pub(crate) fn centroid_of(set: &[&Descriptor]) -> Result<Descriptor, DescriptorError> {
    let first = *set.first().ok_or(DescriptorError::EmptySet)?;
    for d in &set[1..] {
        check_pair(first, d)?;
    }
    Ok(match first {
        Descriptor::Float(v) => {
            let mut acc = vec![0.0f64; v.len()];
            for d in set {
                for (a, x) in acc.iter_mut().zip(d.as_float().unwrap()) {
                    *a += *x as f64;
                }
            }
            let n = set.len() as f64;
            Descriptor::Float(acc.into_iter().map(|a| (a / n) as f32).collect())
        }
        Descriptor::Binary(b) => {
            let bits = b.len() * 8;
            let mut counts = vec![0usize; bits];
            for d in set {
                for (byte_idx, byte) in d.as_binary().unwrap().iter().enumerate() {
                    for bit in 0..8 {
                        if byte & (1 << bit) != 0 {
                            counts[byte_idx * 8 + bit] += 1;
                        }
                    }
                }
            }
            let mut out = vec![0u8; b.len()];
            for (i, c) in counts.iter().enumerate() {
                if 2 * c > set.len() {
                    out[i / 8] |= 1 << (i % 8);
                }
            }
            Descriptor::Binary(out)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
}

impl Keypoint {
    pub fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }
}

/// Descriptors of one image, with optional keypoints and (synthetic)
/// landmark ids aligned index-for-index.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    signature: Signature,
    descriptors: Vec<Descriptor>,
    keypoints: Option<Vec<Keypoint>>,
    landmark_ids: Option<Vec<u32>>,
}

impl DescriptorSet {
    pub fn new(signature: Signature, descriptors: Vec<Descriptor>) -> Result<Self, DescriptorError> {
        for d in &descriptors {
            signature.check(d)?;
        }
        Ok(Self {
            signature,
            descriptors,
            keypoints: None,
            landmark_ids: None,
        })
    }

    pub fn empty(signature: Signature) -> Self {
        Self {
            signature,
            descriptors: Vec::new(),
            keypoints: None,
            landmark_ids: None,
        }
    }

    pub fn with_keypoints(mut self, keypoints: Vec<Keypoint>) -> Result<Self, DescriptorError> {
        if keypoints.len() != self.descriptors.len() {
            return Err(DescriptorError::LengthMismatch {
                what: "keypoints",
                expected: self.descriptors.len(),
                found: keypoints.len(),
            });
        }
        self.keypoints = Some(keypoints);
        Ok(self)
    }

    pub fn with_landmark_ids(mut self, ids: Vec<u32>) -> Result<Self, DescriptorError> {
        if ids.len() != self.descriptors.len() {
            return Err(DescriptorError::LengthMismatch {
                what: "landmark ids",
                expected: self.descriptors.len(),
                found: ids.len(),
            });
        }
        self.landmark_ids = Some(ids);
        Ok(self)
    }

    pub fn signature(&self) -> Signature {
        self.signature
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptors(&self) -> &[Descriptor] {
        &self.descriptors
    }

    pub fn keypoints(&self) -> Option<&[Keypoint]> {
        self.keypoints.as_deref()
    }

    pub fn landmark_ids(&self) -> Option<&[u32]> {
        self.landmark_ids.as_deref()
    }

    /// New set holding the listed rows (and their keypoints / ids) in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, DescriptorError> {
        let len = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(DescriptorError::IndexOutOfRange { index: bad, len });
        }
        Ok(Self {
            signature: self.signature,
            descriptors: indices.iter().map(|&i| self.descriptors[i].clone()).collect(),
            keypoints: self.keypoints.as_ref().map(|k| indices.iter().map(|&i| k[i]).collect()),
            landmark_ids: self
                .landmark_ids
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        })
    }

    /// Bit-level equality, used by the file round-trip checks.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let kp_eq = match (&self.keypoints, &other.keypoints) {
            (None, None) => true,
            (Some(a), Some(b)) => {
                a.len() == b.len()
                    && a.iter()
                        .zip(b)
                        .all(|(p, q)| p.x.to_bits() == q.x.to_bits() && p.y.to_bits() == q.y.to_bits())
            }
            _ => false,
        };
        self.signature == other.signature
            && self.descriptors.len() == other.descriptors.len()
            && self
                .descriptors
                .iter()
                .zip(&other.descriptors)
                .all(|(a, b)| a.bit_eq(b))
            && kp_eq
            && self.landmark_ids == other.landmark_ids
    }
}
