use std::collections::HashMap;

use anyhow::{Context, Result};
use irloc_core::eval::{place_recognition, recall_at_full_precision, PlaceRecognitionParams};
use irloc_core::index::transform;
use irloc_core::io::read_descriptor_set;
use irloc_core::io::read_matches;
use irloc_core::loopdet::MatchSource;
use irloc_core::preprocess::{clahe as run_clahe, read_pgm, write_pgm, ClaheParams};
use irloc_core::vocab::{
    assign_idf, build_vocabulary_with, load_vocabulary, save_vocabulary, TrainParams, TrainingPool, Vocabulary,
};
use irloc_core::{ImageDatabase, LoopDetector, LoopMode, LoopParams};
use serde::Serialize;

use crate::args::{
    ClaheArgs, DbBuildArgs, DbQueryArgs, EvalRecallArgs, LoopParamArgs, LoopdetectArgs, Mode, VocabTrainArgs,
};
use crate::files::{gt_positions, load_frames, matched_only, pair_files, read_gt, write_csv, write_json};
use crate::usage;

pub fn clahe(a: ClaheArgs) -> Result<()> {
    let (x, y) = a
        .tiles
        .split_once('x')
        .and_then(|(x, y)| Some((x.parse::<usize>().ok()?, y.parse::<usize>().ok()?)))
        .ok_or_else(|| usage(format!("--tiles expects COLSxROWS, got {:?}", a.tiles)))?;
    if x == 0 || y == 0 || !(a.clip >= 1.0 && a.clip.is_finite()) {
        return Err(usage("tiles must be positive and --clip finite and at least 1"));
    }
    let img = read_pgm(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let p = ClaheParams {
        tiles_x: x,
        tiles_y: y,
        clip_limit: a.clip,
    };
    write_pgm(&run_clahe(&img, &p)?, &a.out)?;
    Ok(())
}

pub fn load_vocab(path: &std::path::Path) -> Result<Vocabulary> {
    load_vocabulary(path).with_context(|| format!("reading vocabulary {}", path.display()))
}

pub fn vocab_train(a: VocabTrainArgs) -> Result<()> {
    if a.k < 2 || a.levels == 0 {
        return Err(usage("--k must be at least 2 and --levels at least 1"));
    }
    let mut pool: Option<TrainingPool> = None;
    for dir in &a.pairs {
        let frames = load_frames(dir)?;
        let index: HashMap<&str, usize> = frames.stems.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        for (sa, sb, path) in pair_files(dir)? {
            let (Some(&ia), Some(&ib)) = (index.get(sa.as_str()), index.get(sb.as_str())) else {
                anyhow::bail!("match file {} names a missing frame", path.display());
            };
            let m = read_matches(&path).with_context(|| format!("reading {}", path.display()))?;
            let pool = pool.get_or_insert_with(|| TrainingPool::new(frames.sets[ia].signature()));
            pool.add_pair(&frames.sets[ia], &frames.sets[ib], &m)
                .with_context(|| format!("pair {}", path.display()))?;
        }
    }
    let pool = pool.context("no match files found in the pair directories")?;
    let params = TrainParams {
        k: a.k,
        levels: a.levels,
        seed: a.seed,
        max_iters: a.max_iters,
    };
    let vocab = build_vocabulary_with(&pool, &params)?;
    let vocab = assign_idf(&vocab, pool.images())?;
    save_vocabulary(&vocab, &a.out)?;
    eprintln!(
        "trained {} words from {} descriptors in {} pairs",
        vocab.word_count(),
        pool.descriptor_count(),
        pool.pairs_consumed()
    );
    Ok(())
}

pub fn db_build(a: DbBuildArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    if a.di_levels > vocab.levels() {
        return Err(usage(format!(
            "--di-levels {} exceeds vocabulary depth {}",
            a.di_levels,
            vocab.levels()
        )));
    }
    let frames = load_frames(&a.frames)?;
    let sets = if a.matched_only {
        matched_only(&a.frames, &frames)?
    } else {
        frames.sets
    };
    let mut db = ImageDatabase::new(&vocab);
    for set in sets {
        let (bow, fv) = transform(&vocab, &set, a.di_levels)?;
        db.add(bow, fv, (!a.no_descriptors).then_some(set))?;
    }
    db.save(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct QueryRow {
    rank: usize,
    entry_id: u32,
    score: f64,
}

pub fn db_query(a: DbQueryArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let db = ImageDatabase::load(&a.db, &vocab).with_context(|| format!("opening {}", a.db.display()))?;
    let set = read_descriptor_set(&a.query).with_context(|| format!("reading {}", a.query.display()))?;
    if a.di_levels > vocab.levels() {
        return Err(usage(format!(
            "--di-levels {} exceeds vocabulary depth {}",
            a.di_levels,
            vocab.levels()
        )));
    }
    let (bow, _) = transform(&vocab, &set, a.di_levels)?;
    let rows: Vec<QueryRow> = db
        .query(&bow, a.top, None)?
        .into_iter()
        .enumerate()
        .map(|(rank, r)| QueryRow {
            rank,
            entry_id: r.entry_id,
            score: r.score,
        })
        .collect();
    write_csv(a.out.as_deref(), &rows)
}

pub fn loop_params(p: &LoopParamArgs) -> Result<LoopParams> {
    let params = LoopParams {
        alpha: p.alpha,
        max_island_gap: p.max_island_gap,
        temporal_k: p.temporal_k,
        dislocal: p.dislocal,
        min_inliers: p.min_inliers,
        ratio: p.ratio,
        hamming_threshold: p.hamming_threshold,
        ransac_threshold_px: p.ransac_threshold_px,
        di_levels: p.di_levels,
        seed: p.seed,
        ..LoopParams::default()
    };
    params.validate().map_err(|e| usage(e.to_string()))?;
    Ok(params)
}

#[derive(Serialize)]
struct LoopRow {
    query_id: u32,
    status: &'static str,
    entry_id: Option<u32>,
    score: Option<f64>,
    inliers: Option<usize>,
}

pub fn loopdetect(a: LoopdetectArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let params = loop_params(&a.params)?;
    if params.di_levels > vocab.levels() {
        return Err(usage(format!(
            "--di-levels {} exceeds vocabulary depth {}",
            params.di_levels,
            vocab.levels()
        )));
    }
    let mode = match a.mode {
        Mode::Best => LoopMode::BestCandidate,
        Mode::Islands => LoopMode::Islands,
    };
    let source = match &a.matches_dir {
        Some(d) => MatchSource::Directory(d.clone()),
        None => MatchSource::Internal,
    };
    let mut detector = LoopDetector::new(&vocab, params, mode)?.with_match_source(source);
    let frames = load_frames(&a.queries)?;
    let mut rows = Vec::with_capacity(frames.sets.len());
    let mut push = |q: u32, r: irloc_core::LoopResult| {
        rows.push(LoopRow {
            query_id: q,
            status: r.status.as_str(),
            entry_id: r.candidate.as_ref().map(|c| c.entry_id),
            score: r.candidate.as_ref().map(|c| c.score),
            inliers: r.candidate.as_ref().map(|c| c.inlier_count),
        })
    };
    match &a.db {
        Some(path) => {
            let db = ImageDatabase::load(path, &vocab).with_context(|| format!("opening {}", path.display()))?;
            for (q, set) in frames.sets.iter().enumerate() {
                push(q as u32, detector.detect(&db, q as u32, set)?);
            }
        }
        None => {
            let mut db = ImageDatabase::new(&vocab);
            for set in frames.sets {
                let (id, r) = detector.detect_and_add(&mut db, set)?;
                push(id, r);
            }
        }
    }
    write_csv(a.out.as_deref(), &rows)
}

#[derive(Serialize)]
struct RecordRow {
    query_id: u32,
    candidate_id: Option<u32>,
    bow_score: f64,
    inlier_count: usize,
    is_true_positive: bool,
}

#[derive(Serialize)]
struct RecallJson {
    queries: usize,
    threshold: usize,
    recall: f64,
    accepted: usize,
    true_positives: usize,
    radius_m: f64,
}

pub fn eval_recall(a: EvalRecallArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let mut loop_params = loop_params(&a.params)?;
    loop_params.min_inliers = 0;
    if !(a.radius_m > 0.0) || a.queries == 0 {
        return Err(usage("--radius-m and --queries must be positive"));
    }
    let load = |dir: &std::path::Path| -> Result<Vec<irloc_core::DescriptorSet>> {
        let f = load_frames(dir)?;
        if a.matched_only {
            matched_only(dir, &f)
        } else {
            Ok(f.sets)
        }
    };
    let db_sets = load(&a.db_frames)?;
    let q_sets = load(&a.query_frames)?;
    let db_pos = gt_positions(&read_gt(&a.db_gt)?, db_sets.len(), "database")?;
    let q_pos = gt_positions(&read_gt(&a.query_gt)?, q_sets.len(), "query")?;
    let params = PlaceRecognitionParams {
        radius_m: a.radius_m,
        query_count: a.queries,
        loop_params,
    };
    let records = place_recognition(&vocab, &db_sets, &db_pos, &q_sets, &q_pos, &params)?;
    let summary = recall_at_full_precision(&records)?;
    let rows: Vec<RecordRow> = records
        .iter()
        .map(|r| RecordRow {
            query_id: r.query_id,
            candidate_id: r.candidate_id,
            bow_score: r.bow_score,
            inlier_count: r.inlier_count,
            is_true_positive: r.is_true_positive,
        })
        .collect();
    if let Some(out) = &a.out {
        write_csv(Some(out), &rows)?;
    }
    write_json(
        a.summary.as_deref(),
        &RecallJson {
            queries: summary.queries,
            threshold: summary.threshold,
            recall: summary.recall,
            accepted: summary.accepted,
            true_positives: records.iter().filter(|r| r.is_true_positive).count(),
            radius_m: a.radius_m,
        },
    )
}
