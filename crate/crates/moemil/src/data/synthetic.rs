//! Synthetic multi-resolution bag generator.
//!
//! Every bag is a full `roots x fanouts` tree of noise tokens with a
//! class-specific signal planted on top. Class signatures use a shared
//! pair of unit directions (U, W) per group of three classes:
//!
//! * class 3g+0: `U` on level-2 tokens and `W` on deepest-level tokens of
//!   the *same* signal regions (aligned),
//! * class 3g+1: the level assignment swapped (`W` on level 2, `U` deep),
//! * class 3g+2: `U` on level 2 and `W` deep, but in *disjoint* region
//!   subsets (misaligned).
//!
//! Per-token strengths are scaled so all three classes carry identical
//! expected feature mass. Consequences: the bag mean cannot separate the
//! aligned/swapped/misaligned variants, level-2 features alone confuse
//! 3g+0 with 3g+2, deepest-level features alone do too, and telling
//! 3g+0 from 3g+2 requires noticing whether `U` and `W` co-occur in the
//! same root region. Telling 3g+0 from 3g+1 requires resolution-aware
//! features.

use super::{Bag, BagRecord};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub slides_per_class: usize,
    /// Level-1 region count per bag.
    pub roots: usize,
    /// Children per node for levels 2..=R; R = 1 + fanouts.len().
    pub fanouts: Vec<usize>,
    pub d_in: usize,
    /// Per-token signal strength at level 2.
    pub signal: f64,
    /// Isotropic noise standard deviation.
    pub sigma: f64,
    /// Fraction of root regions carrying signal (0, 1].
    pub signal_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 3,
            slides_per_class: 30,
            roots: 4,
            fanouts: vec![2, 3],
            d_in: 64,
            signal: 4.0,
            sigma: 0.25,
            signal_fraction: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn levels(&self) -> u8 {
        (1 + self.fanouts.len()) as u8
    }

    pub fn tokens_per_bag(&self) -> usize {
        let mut total = self.roots;
        let mut level = self.roots;
        for &f in &self.fanouts {
            level *= f;
            total += level;
        }
        total
    }

    /// Signal regions per bag.
    pub fn signal_roots(&self) -> usize {
        ((self.signal_fraction * self.roots as f64).round() as usize).max(1)
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.slides_per_class == 0 || self.roots == 0 || self.d_in == 0 {
            return Err(Error::contract("synthetic spec counts must be positive"));
        }
        if self.fanouts.contains(&0) {
            return Err(Error::contract("synthetic fan-outs must be positive"));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return Err(Error::contract(format!(
                "signal_fraction {} outside (0, 1]",
                self.signal_fraction
            )));
        }
        if self.sigma < 0.0 || self.signal < 0.0 {
            return Err(Error::contract("signal and sigma must be nonnegative"));
        }
        if self.classes >= 2 && self.fanouts.len() < 2 {
            return Err(Error::contract(
                "class signatures need at least three levels (two fan-outs)",
            ));
        }
        if self.classes >= 3 && 2 * self.signal_roots() > self.roots {
            return Err(Error::contract(format!(
                "misaligned classes need two disjoint region subsets: \
                 2 * {} signal roots > {} roots",
                self.signal_roots(),
                self.roots
            )));
        }
        Ok(())
    }
}

/// Structure template shared by every bag: record metadata plus, per
/// record, its root region (1-based).
struct Template {
    records: Vec<(u8, Vec<u16>, (u16, u16))>,
    root_of: Vec<u16>,
}

fn build_template(spec: &SyntheticSpec) -> Template {
    let mut records = Vec::new();
    let mut root_of = Vec::new();
    let w1 = (spec.roots as f64).sqrt().ceil() as u16;
    for i in 1..=spec.roots as u16 {
        let coord = ((i - 1) / w1, (i - 1) % w1);
        expand(spec, 1, vec![i], coord, i, &mut records, &mut root_of);
    }
    Template { records, root_of }
}

fn expand(
    spec: &SyntheticSpec,
    level: u8,
    path: Vec<u16>,
    coord: (u16, u16),
    root: u16,
    records: &mut Vec<(u8, Vec<u16>, (u16, u16))>,
    root_of: &mut Vec<u16>,
) {
    records.push((level, path.clone(), coord));
    root_of.push(root);
    if (level as usize) > spec.fanouts.len() {
        return;
    }
    if let Some(&fanout) = spec.fanouts.get(level as usize - 1) {
        let cw = (fanout as f64).sqrt().ceil() as u16;
        for j in 1..=fanout as u16 {
            let child_coord = (coord.0 * cw + (j - 1) / cw, coord.1 * cw + (j - 1) % cw);
            let mut child_path = path.clone();
            child_path.push(j);
            expand(spec, level + 1, child_path, child_coord, root, records, root_of);
        }
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Deterministic dataset: `classes * slides_per_class` bags, class-major.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Bag>> {
    spec.validate()?;
    let template = build_template(spec);
    let levels = spec.levels();
    let level_a: u8 = 2.min(levels);
    let level_b: u8 = levels;

    // equalize expected mass between the two signal levels
    let tokens_at = |l: u8| -> usize {
        let mut count = 1usize;
        for &f in spec.fanouts.iter().take(l as usize - 1) {
            count *= f;
        }
        count // per root
    };
    let strength_a = spec.signal;
    let strength_b = spec.signal * tokens_at(level_a) as f64 / tokens_at(level_b) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups = spec.classes.div_ceil(3);
    let dirs: Vec<(Vec<f64>, Vec<f64>)> = (0..groups)
        .map(|_| (unit_direction(&mut rng, spec.d_in), unit_direction(&mut rng, spec.d_in)))
        .collect();

    let normal = Normal::new(0.0, spec.sigma.max(0.0)).map_err(|e| Error::Numeric(e.to_string()))?;
    let m = spec.signal_roots();
    let mut bags = Vec::with_capacity(spec.classes * spec.slides_per_class);
    for class in 0..spec.classes {
        let (u, w) = &dirs[class / 3];
        for slide in 0..spec.slides_per_class {
            // per-bag choice of signal regions
            let mut roots: Vec<u16> = (1..=spec.roots as u16).collect();
            roots.shuffle(&mut rng);
            let set_a: Vec<u16> = roots[..m].to_vec();
            let set_b: Vec<u16> = if class % 3 == 2 {
                roots[m..2 * m].to_vec()
            } else {
                set_a.clone()
            };
            // level assignment: class 3g+1 swaps which direction sits where
            let (dir_a, dir_b) = if class % 3 == 1 { (w, u) } else { (u, w) };

            let mut records = Vec::with_capacity(template.records.len());
            for (ix, (level, path, coord)) in template.records.iter().enumerate() {
                let mut features: Vec<f32> =
                    (0..spec.d_in).map(|_| normal.sample(&mut rng) as f32).collect();
                let root = template.root_of[ix];
                if *level == level_a && set_a.contains(&root) {
                    for (f, d) in features.iter_mut().zip(dir_a) {
                        *f += (strength_a * d) as f32;
                    }
                }
                if *level == level_b && set_b.contains(&root) {
                    for (f, d) in features.iter_mut().zip(dir_b) {
                        *f += (strength_b * d) as f32;
                    }
                }
                records.push(BagRecord {
                    level: *level,
                    path: path.clone(),
                    coord: *coord,
                    features,
                });
            }
            bags.push(Bag {
                slide_id: format!("syn_c{class}_{slide:03}"),
                label: class,
                levels,
                d_in: spec.d_in,
                records,
            });
        }
    }
    Ok(bags)
}
