//! Dataset manifest: CSV with header `slide_id,path,label,split` plus the
//! deterministic stratified splitter.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?}, expected train|val|test"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn of_split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn class_count(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            reason: e.to_string(),
        })?;
        w.write_record(["slide_id", "path", "label", "split"]).map_err(csv_err(path))?;
        for e in &self.entries {
            w.write_record([
                e.slide_id.as_str(),
                &e.path.display().to_string(),
                &e.label.to_string(),
                e.split.as_str(),
            ])
            .map_err(csv_err(path))?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_csv(path: &Path) -> Result<Manifest> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            reason: e.to_string(),
        })?;
        let headers = r.headers().map_err(csv_err(path))?.clone();
        let expected = ["slide_id", "path", "label", "split"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: 0,
                reason: format!("bad header {headers:?}, expected {expected:?}"),
            });
        }
        let mut entries = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err(path))?;
            if rec.len() != 4 {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: 0,
                    reason: format!("row has {} fields, expected 4", rec.len()),
                });
            }
            let slide_id = rec[0].to_string();
            if !seen.insert(slide_id.clone()) {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: 0,
                    reason: format!("duplicate slide_id {slide_id:?}"),
                });
            }
            let label: usize = rec[2].parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                offset: 0,
                reason: format!("bad label {:?}", &rec[2]),
            })?;
            entries.push(ManifestEntry {
                slide_id,
                path: PathBuf::from(&rec[1]),
                label,
                split: Split::parse(&rec[3])?,
            });
        }
        Ok(Manifest { entries })
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format {
        path: path.display().to_string(),
        offset: 0,
        reason: e.to_string(),
    }
}

/// Stratified train/val/test split, deterministic by seed.
///
/// Per class, counts follow the largest-remainder rule, and every split
/// with a nonzero ratio receives at least one slide per class.
pub fn split_manifest(
    slides: &[(String, PathBuf, usize)],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Manifest> {
    let (rt, rv, rs) = ratios;
    if rt < 0.0 || rv < 0.0 || rs < 0.0 || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "split ratios {ratios:?} must be nonnegative and sum to 1"
        )));
    }
    let parts = [rt, rv, rs].iter().filter(|&&r| r > 0.0).count();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, _, label)) in slides.iter().enumerate() {
        by_class.entry(*label).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: Vec<Option<Split>> = vec![None; slides.len()];
    for (label, mut ixs) in by_class {
        if ixs.len() < parts {
            return Err(Error::contract(format!(
                "class {label} has {} slides, fewer than the {parts} split parts",
                ixs.len()
            )));
        }
        ixs.shuffle(&mut rng);
        let n = ixs.len();
        let raw = [rt * n as f64, rv * n as f64, rs * n as f64];
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut rest = n - counts.iter().sum::<usize>();
        // distribute the remainder by largest fractional part, ties toward
        // the earlier split
        let mut frac: Vec<(usize, f64)> = raw
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r - r.floor()))
            .collect();
        frac.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut fi = 0;
        while rest > 0 {
            counts[frac[fi % 3].0] += 1;
            rest -= 1;
            fi += 1;
        }
        // nonzero-ratio splits must not starve
        for i in 0..3 {
            if [rt, rv, rs][i] > 0.0 && counts[i] == 0 {
                let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
        let mut it = ixs.into_iter();
        for (count, split) in counts.iter().zip([Split::Train, Split::Val, Split::Test]) {
            for _ in 0..*count {
                assignment[it.next().unwrap()] = Some(split);
            }
        }
    }

    let entries = slides
        .iter()
        .zip(assignment)
        .map(|((slide_id, path, label), split)| ManifestEntry {
            slide_id: slide_id.clone(),
            path: path.clone(),
            label: *label,
            split: split.expect("every slide assigned"),
        })
        .collect();
    Ok(Manifest { entries })
}
