use anyhow::Result;
use irloc_core::eval::{bench_database, bench_distances, random_sets};
use irloc_core::vocab::{assign_idf, build_vocabulary_with, TrainParams, TrainingPool};
use irloc_core::{DescriptorKind, Signature};
use serde_json::json;

use crate::args::{BenchArgs, BenchCommand};
use crate::files::write_json;
use crate::pipeline::load_vocab;
use crate::usage;

pub fn run(a: BenchArgs) -> Result<()> {
    match a.which {
        BenchCommand::Distances { dim, bits, pairs, seed } => {
            if dim == 0 || bits == 0 || !bits.is_multiple_of(8) || pairs == 0 {
                return Err(usage(
                    "--dim and --pairs must be positive and --bits a positive multiple of 8",
                ));
            }
            let r = bench_distances(dim, bits, pairs, seed)?;
            write_json(
                None,
                &json!({
                    "pairs": r.pairs,
                    "float_dim": dim,
                    "binary_bits": bits,
                    "l2_ns_per_pair": r.l2_ns,
                    "hamming_ns_per_pair": r.hamming_ns,
                    "ratio": r.ratio,
                }),
            )
        }
        BenchCommand::Database {
            vocab,
            entries,
            features,
            dim,
            k,
            levels,
            di_levels,
            seed,
        } => {
            if entries == 0 || features == 0 || dim == 0 || k < 2 || levels == 0 {
                return Err(usage("sizes must be positive and --k at least 2"));
            }
            let vocab = match vocab {
                Some(p) => load_vocab(&p)?,
                None => {
                    let sig = Signature {
                        kind: DescriptorKind::Float,
                        dim: u16::try_from(dim).map_err(|_| usage("--dim too large"))?,
                    };
                    let mut pool = TrainingPool::new(sig);
                    for set in random_sets(sig, 40, features, seed ^ 0x5EED)? {
                        pool.add_image(set)?;
                    }
                    let v = build_vocabulary_with(
                        &pool,
                        &TrainParams {
                            k,
                            levels,
                            seed,
                            max_iters: 5,
                        },
                    )?;
                    assign_idf(&v, pool.images())?
                }
            };
            if di_levels > vocab.levels() {
                return Err(usage(format!(
                    "--di-levels {di_levels} exceeds vocabulary depth {}",
                    vocab.levels()
                )));
            }
            let r = bench_database(entries, features, &vocab, di_levels, seed)?;
            write_json(
                None,
                &json!({
                    "entries": r.entries,
                    "features": r.features,
                    "words": vocab.word_count(),
                    "di_levels": di_levels,
                    "images_per_s_di": r.images_per_s_di,
                    "images_per_s_no_di": r.images_per_s_no_di,
                }),
            )
        }
    }
}
