use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use irloc_core::eval::timelapse_eval;
use irloc_core::io::{write_descriptor_set, write_matches};
use irloc_core::map::{build_sim_map, MapDrift, RelocParams};
use irloc_core::rng::derive_seed;
use irloc_core::simgen::{lambda, timelapse as render_timelapse, truth_matches, Scenario};
use irloc_core::{DescriptorKind, Intrinsics, LoopMode, LoopParams, MapFile};
use serde::Serialize;

use crate::args::{Kind, MapBuildArgs, RelocArgs, SimgenArgs, TimelapseArgs};
use crate::files::{gt_positions, load_frames, read_gt, write_csv, write_json, GtRow, PoseRow};
use crate::pipeline::load_vocab;
use crate::usage;

fn kind(k: Kind) -> DescriptorKind {
    match k {
        Kind::Float => DescriptorKind::Float,
        Kind::Binary => DescriptorKind::Binary,
    }
}

pub fn read_manifest(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Scenario::from_manifest(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn simgen(a: SimgenArgs) -> Result<()> {
    let mut sc = match &a.manifest {
        Some(p) => read_manifest(p)?,
        None => Scenario::loop_pair(a.seed, kind(a.kind)),
    };
    if let Some(n) = a.frames {
        if n < 2 {
            return Err(usage("--frames must be at least 2"));
        }
        for p in &mut sc.passes {
            p.frames = n;
        }
    }
    let world = sc.world()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("manifest.txt"), sc.to_manifest())?;
    for (i, spec) in sc.passes.iter().enumerate() {
        let dir = a.out.join(&spec.name);
        fs::create_dir_all(&dir)?;
        let frames = sc.render_pass(&world, i)?;
        let mut gt = Vec::with_capacity(frames.len());
        for (j, f) in frames.iter().enumerate() {
            write_descriptor_set(&f.set, dir.join(format!("{j:06}.dsc")))?;
            if j > 0 {
                let m = truth_matches(&frames[j - 1].truth, &f.truth);
                write_matches(&m, dir.join(format!("{:06}__{j:06}.mch", j - 1)))?;
            }
            let c = f.truth.pose.center();
            gt.push(GtRow {
                entry_id: j as u32,
                t_unix_s: j as f64,
                x_m: c.x,
                y_m: c.y,
                z_m: c.z,
            });
        }
        write_csv(Some(&dir.join("gt.csv")), &gt)?;
    }
    Ok(())
}

fn parse_section(s: &str) -> Result<std::ops::Range<f64>> {
    let (a, b) = s
        .split_once(':')
        .and_then(|(a, b)| Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?)))
        .ok_or_else(|| usage(format!("--section-m expects START:END, got {s:?}")))?;
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(usage(format!("empty section {s:?}")));
    }
    Ok(a..b)
}

pub fn map_build(a: MapBuildArgs) -> Result<()> {
    let section = parse_section(&a.section_m)?;
    let drift = MapDrift {
        yaw_rate_rad_per_m: a.yaw_drift,
        climb_rate: a.climb_drift,
        landmark_noise_frac: a.landmark_noise,
    };
    if !(drift.landmark_noise_frac >= 0.0) || !drift.yaw_rate_rad_per_m.is_finite() || !drift.climb_rate.is_finite() {
        return Err(usage("drift rates must be finite and the landmark noise non-negative"));
    }
    let sc = read_manifest(&a.manifest)?;
    let pass = sc
        .passes
        .iter()
        .position(|p| p.name == a.pass)
        .ok_or_else(|| usage(format!("no pass named {:?} in the manifest", a.pass)))?;
    let vocab = load_vocab(&a.vocab)?;
    if a.di_levels > vocab.levels() {
        return Err(usage(format!(
            "--di-levels {} exceeds vocabulary depth {}",
            a.di_levels,
            vocab.levels()
        )));
    }
    let world = sc.world()?;
    let frames = sc.render_pass(&world, pass)?;
    let sim = build_sim_map(&vocab, &world, &frames, section.clone(), &drift, a.seed, a.di_levels)?;
    if sim.map.keyframes().is_empty() {
        bail!("no frame of pass {:?} lies in section {}", a.pass, a.section_m);
    }
    sim.map.save(&a.out)?;
    let frame_index: Vec<usize> = (0..frames.len())
        .filter(|&i| section.contains(&frames[i].arc_m))
        .collect();
    let rows: Vec<GtRow> = sim
        .keyframe_gt
        .iter()
        .map(|(&k, c)| GtRow {
            entry_id: k,
            t_unix_s: frame_index[k as usize] as f64,
            x_m: c.x,
            y_m: c.y,
            z_m: c.z,
        })
        .collect();
    write_csv(Some(&a.gt_out), &rows)
}

fn parse_intrinsics(s: &str) -> Result<Intrinsics> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--intrinsics expects FX,FY,CX,CY, got {s:?}")))?;
    if v.len() != 4 {
        return Err(usage(format!("--intrinsics expects four values, got {}", v.len())));
    }
    Intrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| usage(e.to_string()))
}

#[derive(Serialize)]
struct RelocRow {
    query_id: u32,
    status: &'static str,
    keyframe: Option<u32>,
    inliers: usize,
    x_m: Option<f64>,
    y_m: Option<f64>,
    z_m: Option<f64>,
    error_m: Option<f64>,
}

#[derive(Serialize)]
struct RelocJson {
    queries: usize,
    accepted: usize,
    accepted_fraction: f64,
    median_error_m: Option<f64>,
    max_error_m: Option<f64>,
}

pub fn reloc(a: RelocArgs) -> Result<()> {
    let k = match (&a.intrinsics, &a.manifest) {
        (Some(s), _) => parse_intrinsics(s)?,
        (None, Some(m)) => read_manifest(m)?.intrinsics,
        (None, None) => Scenario::default_intrinsics(),
    };
    let mut params = RelocParams {
        window: a.window,
        gate_m: a.gate_m,
        min_inliers: a.min_inliers,
        pnp_threshold_px: a.pnp_threshold_px,
        mode: LoopMode::Islands,
        ..RelocParams::default()
    };
    params.loop_params.alpha = a.alpha;
    params.loop_params.temporal_k = a.temporal_k;
    params.loop_params.di_levels = a.di_levels;
    params.loop_params.seed = a.seed;
    params.loop_params.validate().map_err(|e| usage(e.to_string()))?;
    if !(a.gate_m > 0.0) || !(a.pnp_threshold_px > 0.0) || a.window == 0 {
        return Err(usage("--gate-m, --pnp-threshold-px and --window must be positive"));
    }
    let vocab = load_vocab(&a.vocab)?;
    let map = MapFile::load(&a.map, &vocab).with_context(|| format!("opening map {}", a.map.display()))?;
    let queries = load_frames(&a.queries)?.sets;
    let query_gt = gt_positions(&read_gt(&a.gt)?, queries.len(), "query")?;
    let map_gt = read_gt(&a.map_gt)?;
    gt_positions(&map_gt, map.keyframes().len(), "keyframe")?;
    let records = irloc_core::map::relocalize_sequence(&map, &vocab, &queries, &query_gt, &map_gt, &k, &params)?;

    let rows: Vec<RelocRow> = records
        .iter()
        .map(|r| RelocRow {
            query_id: r.query_id,
            status: r.status.as_str(),
            keyframe: r.matched_keyframe,
            inliers: r.inliers,
            x_m: r.position.map(|p| p.x),
            y_m: r.position.map(|p| p.y),
            z_m: r.position.map(|p| p.z),
            error_m: r.error_m,
        })
        .collect();
    write_csv(a.out.as_deref(), &rows)?;
    if let Some(path) = &a.poses {
        let poses: Vec<PoseRow> = records
            .iter()
            .filter(|r| r.is_accepted())
            .filter_map(|r| {
                let pose = r.pose?;
                let q = pose.quaternion();
                Some(PoseRow {
                    entry_id: r.query_id,
                    qw: q.w,
                    qx: q.i,
                    qy: q.j,
                    qz: q.k,
                    tx: pose.translation.x,
                    ty: pose.translation.y,
                    tz: pose.translation.z,
                })
            })
            .collect();
        write_csv(Some(path), &poses)?;
    }
    if let Some(path) = &a.summary {
        let mut errs: Vec<f64> = records.iter().filter_map(|r| r.error_m).collect();
        errs.sort_by(f64::total_cmp);
        let accepted = records.iter().filter(|r| r.is_accepted()).count();
        write_json(
            Some(path),
            &RelocJson {
                queries: records.len(),
                accepted,
                accepted_fraction: accepted as f64 / records.len() as f64,
                median_error_m: errs.get(errs.len() / 2).copied(),
                max_error_m: errs.last().copied(),
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct LapseRow {
    tau: f64,
    lambda: f64,
    matches: usize,
    correct: usize,
}

pub fn timelapse(a: TimelapseArgs) -> Result<()> {
    if a.steps == 0 || !(0.0..=1.0).contains(&a.tau0) || !(a.px_tol >= 0.0) {
        return Err(usage(
            "--steps must be positive, --tau0 in [0, 1] and --px-tol non-negative",
        ));
    }
    let mut sc = match &a.manifest {
        Some(p) => read_manifest(p)?,
        None => Scenario::loop_pair(a.seed, DescriptorKind::Float),
    };
    if let Some(k) = a.kind {
        sc.kind = kind(k);
    }
    let poses = sc.pass_poses(0);
    let pose = poses
        .get(a.frame)
        .ok_or_else(|| {
            usage(format!(
                "--frame {} but the first pass has {} frames",
                a.frame,
                poses.len()
            ))
        })?
        .1;
    let vocab = a.vocab.as_deref().map(load_vocab).transpose()?;
    if let Some(v) = &vocab {
        if v.signature().kind != sc.kind {
            bail!("vocabulary descriptors do not match the scenario kind");
        }
    }
    let params = LoopParams {
        di_levels: a.di_levels,
        ..LoopParams::default()
    };
    params.validate().map_err(|e| usage(e.to_string()))?;
    let world = sc.world()?;
    let taus: Vec<f64> = (0..=a.steps).map(|i| i as f64 / a.steps as f64).collect();
    let frames = render_timelapse(
        &world,
        &pose,
        &taus,
        &sc.intrinsics,
        &sc.drift,
        sc.kind,
        derive_seed(sc.seed, 0x544C),
    )?;
    let reference = (a.tau0 * a.steps as f64).round() as usize;
    let counts = timelapse_eval(&frames, reference, a.px_tol, vocab.as_ref(), &params)?;
    let rows: Vec<LapseRow> = counts
        .iter()
        .map(|c| LapseRow {
            tau: c.tau,
            lambda: lambda(c.tau),
            matches: c.matches,
            correct: c.correct,
        })
        .collect();
    write_csv(a.out.as_deref(), &rows)
}
