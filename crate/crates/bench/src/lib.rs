//! Fixtures shared by the benchmarks.

use irloc_core::eval::random_sets;
use irloc_core::vocab::{assign_idf, build_vocabulary_with, TrainParams, TrainingPool};
use irloc_core::{DescriptorKind, DescriptorSet, Signature, Vocabulary};

pub fn float_signature(dim: u16) -> Signature {
    Signature {
        kind: DescriptorKind::Float,
        dim,
    }
}

pub fn binary_signature(bits: u16) -> Signature {
    Signature {
        kind: DescriptorKind::Binary,
        dim: bits,
    }
}

/// Vocabulary trained on `images` random images of `features` descriptors,
/// with IDF weights from the same images.
pub fn random_vocabulary(
    sig: Signature,
    k: usize,
    levels: usize,
    images: usize,
    features: usize,
    seed: u64,
) -> Vocabulary {
    let mut pool = TrainingPool::new(sig);
    for set in random_sets(sig, images, features, seed).expect("random sets") {
        pool.add_image(set).expect("pool");
    }
    let params = TrainParams {
        k,
        levels,
        seed,
        max_iters: 5,
    };
    let v = build_vocabulary_with(&pool, &params).expect("train");
    assign_idf(&v, pool.images()).expect("idf")
}

pub fn query_images(sig: Signature, count: usize, features: usize, seed: u64) -> Vec<DescriptorSet> {
    random_sets(sig, count, features, seed).expect("random sets")
}
