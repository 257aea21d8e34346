//! Attention heatmaps: per-level grids, PGM rasters and an SVG overlay.
//!
//! Each resolution level gets a grid spanning its coordinate range.
//! Present cells hold the token's attention min-max renormalized within
//! the level; a constant level maps to 0.5 by convention. Absent cells
//! are a sentinel: `None` in the bundle, byte 0 in PGM (present cells
//! occupy 1..=255), skipped in SVG. The SVG uses a blue -> white -> red
//! ramp with its midpoint at 0.5.

use crate::data::Bag;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LevelGrid {
    pub level: u8,
    pub rows: usize,
    pub cols: usize,
    /// Row-major; `None` marks grid cells without a patch.
    pub cells: Vec<Option<f64>>,
    /// Raw attention range used for the renormalization.
    pub raw_min: f64,
    pub raw_max: f64,
}

impl LevelGrid {
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.cols + col]
    }
}

#[derive(Debug, Clone)]
pub struct HeatmapBundle {
    pub levels: Vec<LevelGrid>,
}

/// Builds per-level grids of renormalized attention. `attention` is in
/// original token order (as reported by the forward pass).
pub fn build_heatmap(bag: &Bag, attention: &[f64]) -> Result<HeatmapBundle> {
    if attention.len() != bag.len() {
        return Err(Error::contract(format!(
            "attention has {} entries for {} tokens",
            attention.len(),
            bag.len()
        )));
    }
    let mut levels = Vec::new();
    for level in 1..=bag.levels {
        let tokens: Vec<(usize, (u16, u16))> = bag
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.level == level)
            .map(|(i, r)| (i, r.coord))
            .collect();
        if tokens.is_empty() {
            continue;
        }
        let rows = tokens.iter().map(|&(_, (r, _))| r as usize).max().unwrap() + 1;
        let cols = tokens.iter().map(|&(_, (_, c))| c as usize).max().unwrap() + 1;
        let raw: Vec<f64> = tokens.iter().map(|&(i, _)| attention[i]).collect();
        let raw_min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let raw_max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = raw_max - raw_min;
        let mut cells = vec![None; rows * cols];
        for (&(_, (r, c)), &a) in tokens.iter().zip(&raw) {
            let norm = if span > 0.0 { (a - raw_min) / span } else { 0.5 };
            cells[r as usize * cols + c as usize] = Some(norm);
        }
        levels.push(LevelGrid {
            level,
            rows,
            cols,
            cells,
            raw_min,
            raw_max,
        });
    }
    Ok(HeatmapBundle { levels })
}

/// Binary 8-bit P5 raster. Absent cells are 0; present cells map
/// [0, 1] onto 1..=255.
pub fn grid_to_pgm(grid: &LevelGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.cols, grid.rows).into_bytes();
    for cell in &grid.cells {
        out.push(match cell {
            None => 0u8,
            Some(v) => 1 + (v.clamp(0.0, 1.0) * 254.0).round() as u8,
        });
    }
    out
}

/// Diverging blue -> white -> red ramp with midpoint 0.5.
fn ramp(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, x: f64| (a + (b - a) * x).round() as u8;
    if t < 0.5 {
        let x = t * 2.0;
        (lerp(0.0, 255.0, x), lerp(0.0, 255.0, x), 255)
    } else {
        let x = (t - 0.5) * 2.0;
        (255, lerp(255.0, 0.0, x), lerp(255.0, 0.0, x))
    }
}

/// One SVG with all level grids side by side.
pub fn bundle_to_svg(bundle: &HeatmapBundle) -> String {
    const CELL: usize = 16;
    const GAP: usize = 24;
    const LABEL: usize = 16;
    let width: usize = bundle
        .levels
        .iter()
        .map(|g| g.cols * CELL)
        .sum::<usize>()
        + GAP * bundle.levels.len().saturating_sub(1);
    let height = bundle.levels.iter().map(|g| g.rows * CELL).max().unwrap_or(0) + LABEL;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    );
    let mut x0 = 0usize;
    for grid in &bundle.levels {
        svg.push_str(&format!(
            "  <text x=\"{x0}\" y=\"12\" font-family=\"monospace\" font-size=\"12\">level {}</text>\n",
            grid.level
        ));
        for r in 0..grid.rows {
            for ccol in 0..grid.cols {
                if let Some(v) = grid.get(r, ccol) {
                    let (cr, cg, cb) = ramp(v);
                    svg.push_str(&format!(
                        "  <rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" \
                         fill=\"rgb({cr},{cg},{cb})\"/>\n",
                        x0 + ccol * CELL,
                        LABEL + r * CELL,
                    ));
                }
            }
        }
        x0 += grid.cols * CELL + GAP;
    }
    svg.push_str("</svg>\n");
    svg
}

/// CSV of the raw attention values, bit-for-bit as reported.
pub fn attention_csv(bag: &Bag, attention: &[f32]) -> String {
    let mut out = String::from("token_id,level,path,row,col,attention\n");
    for (i, rec) in bag.records.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            rec.level,
            crate::hierarchy::format_path(&rec.path),
            rec.coord.0,
            rec.coord.1,
            attention[i]
        ));
    }
    out
}
