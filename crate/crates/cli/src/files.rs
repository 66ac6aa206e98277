//! Directory layouts and the CSV/JSON report formats.
//!
//! A frame directory holds `.dsc` descriptor sets, processed in file-name
//! order, plus optional `A__B.mch` files with matches between frames `A.dsc`
//! and `B.dsc`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use irloc_core::io::{read_descriptor_set, read_matches};
use irloc_core::DescriptorSet;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub struct Frames {
    pub stems: Vec<String>,
    pub sets: Vec<DescriptorSet>,
}

fn sorted_entries(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_frames(dir: &Path) -> Result<Frames> {
    let paths = sorted_entries(dir, "dsc")?;
    if paths.is_empty() {
        bail!("no .dsc files in {}", dir.display());
    }
    let mut stems = Vec::with_capacity(paths.len());
    let mut sets = Vec::with_capacity(paths.len());
    for p in paths {
        sets.push(read_descriptor_set(&p).with_context(|| format!("reading {}", p.display()))?);
        stems.push(stem(&p));
    }
    Ok(Frames { stems, sets })
}

/// `A__B.mch` files of a directory as `(A, B, path)`.
pub fn pair_files(dir: &Path) -> Result<Vec<(String, String, PathBuf)>> {
    let mut out = Vec::new();
    for p in sorted_entries(dir, "mch")? {
        let s = stem(&p);
        match s.split_once("__") {
            Some((a, b)) => out.push((a.to_string(), b.to_string(), p)),
            None => bail!("match file {} is not named A__B.mch", p.display()),
        }
    }
    Ok(out)
}

/// Keeps, for every frame, the features that appear in at least one match
/// file of the directory.
pub fn matched_only(dir: &Path, frames: &Frames) -> Result<Vec<DescriptorSet>> {
    let index: HashMap<&str, usize> = frames.stems.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut keep: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); frames.sets.len()];
    for (a, b, path) in pair_files(dir)? {
        let (Some(&ia), Some(&ib)) = (index.get(a.as_str()), index.get(b.as_str())) else {
            bail!("match file {} names a missing frame", path.display());
        };
        for (x, y) in read_matches(&path).with_context(|| format!("reading {}", path.display()))? {
            if x as usize >= frames.sets[ia].len() || y as usize >= frames.sets[ib].len() {
                bail!("match ({x}, {y}) in {} is out of range", path.display());
            }
            keep[ia].insert(x as usize);
            keep[ib].insert(y as usize);
        }
    }
    frames
        .sets
        .iter()
        .zip(keep)
        .map(|(set, k)| Ok(set.select(&k.into_iter().collect::<Vec<_>>())?))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtRow {
    pub entry_id: u32,
    pub t_unix_s: f64,
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub entry_id: u32,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

pub fn read_gt(path: &Path) -> Result<BTreeMap<u32, Vector3<f64>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = BTreeMap::new();
    for row in r.deserialize() {
        let row: GtRow = row.with_context(|| format!("parsing {}", path.display()))?;
        if out
            .insert(row.entry_id, Vector3::new(row.x_m, row.y_m, row.z_m))
            .is_some()
        {
            bail!("{}: duplicate entry_id {}", path.display(), row.entry_id);
        }
    }
    Ok(out)
}

/// Positions for ids `0..n`, failing on gaps.
pub fn gt_positions(gt: &BTreeMap<u32, Vector3<f64>>, n: usize, what: &str) -> Result<Vec<Vector3<f64>>> {
    (0..n as u32)
        .map(|i| {
            gt.get(&i)
                .copied()
                .with_context(|| format!("{what} ground truth has no entry_id {i}"))
        })
        .collect()
}

/// Writes CSV rows to `path`, or stdout when `None`.
pub fn write_csv<T: Serialize>(path: Option<&Path>, rows: &[T]) -> Result<()> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_file_names() {
        let t = tempfile::tempdir().unwrap();
        for n in ["b__c.mch", "a__b.mch", "a.dsc"] {
            fs::write(t.path().join(n), b"").unwrap();
        }
        let pairs: Vec<(String, String)> = pair_files(t.path())
            .unwrap()
            .into_iter()
            .map(|(a, b, _)| (a, b))
            .collect();
        assert_eq!(pairs, [("a".into(), "b".into()), ("b".into(), "c".into())]);
        fs::write(t.path().join("loose.mch"), b"").unwrap();
        assert!(pair_files(t.path()).is_err());
    }

    #[test]
    fn gt_round_trip_and_gaps() {
        let t = tempfile::tempdir().unwrap();
        let p = t.path().join("gt.csv");
        let rows = [
            GtRow {
                entry_id: 1,
                t_unix_s: 1.0,
                x_m: 4.0,
                y_m: 5.0,
                z_m: 6.0,
            },
            GtRow {
                entry_id: 0,
                t_unix_s: 0.0,
                x_m: 1.0,
                y_m: 2.0,
                z_m: 3.0,
            },
        ];
        write_csv(Some(&p), &rows).unwrap();
        let gt = read_gt(&p).unwrap();
        let pos = gt_positions(&gt, 2, "test").unwrap();
        assert_eq!(pos, [Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.0, 5.0, 6.0)]);
        assert!(gt_positions(&gt, 3, "test").is_err());
        write_csv(Some(&p), &[rows[0], rows[0]]).unwrap();
        assert!(read_gt(&p).is_err());
    }
}
