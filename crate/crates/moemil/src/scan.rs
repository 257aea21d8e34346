//! Scan serializations of a patch hierarchy.
//!
//! Two schemes are provided. The region-nested scan expands each root
//! depth-first, emitting a node immediately before its descendants, so
//! every root region occupies one contiguous span. The resolution-ordered
//! scan groups all tokens of a level together, coarsest first, raster
//! order within a level.

use crate::error::{Error, Result};
use crate::hierarchy::{format_path, PatchHierarchy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanScheme {
    RegionNested,
    ResolutionOrdered,
}

/// A permutation of a hierarchy's token ids plus per-position metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    pub scheme: ScanScheme,
    /// position -> token_id (a bijection over the hierarchy's tokens).
    pub order: Vec<usize>,
    /// Resolution level of the token at each position.
    pub level_of: Vec<u8>,
    /// Root-region index (first path component) at each position.
    pub region_of: Vec<u16>,
}

impl ScanOrder {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// position of each token id in this order (inverse permutation).
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0usize; self.order.len()];
        for (pos, &tid) in self.order.iter().enumerate() {
            inv[tid] = pos;
        }
        inv
    }
}

/// Depth-first preorder over the hierarchy: each node is emitted
/// immediately before its recursively expanded children; children ascend
/// by child index and roots by root index.
pub fn region_nested_scan(h: &PatchHierarchy) -> ScanOrder {
    let mut order = Vec::with_capacity(h.len());
    let mut level_of = Vec::with_capacity(h.len());
    let mut region_of = Vec::with_capacity(h.len());
    let mut stack = Vec::new();
    for &root in h.roots().iter().rev() {
        stack.push(root);
    }
    while let Some(ix) = stack.pop() {
        let node = h.node(ix);
        order.push(node.token_id);
        level_of.push(node.level);
        region_of.push(node.path[0]);
        for &child in h.children(ix).iter().rev() {
            stack.push(child);
        }
    }
    ScanOrder {
        scheme: ScanScheme::RegionNested,
        order,
        level_of,
        region_of,
    }
}

/// All level-1 tokens first, then level-2, and so on; within a level,
/// raster order by coordinate (row-major), ties broken by path.
pub fn resolution_ordered_scan(h: &PatchHierarchy) -> ScanOrder {
    let mut ixs: Vec<usize> = (0..h.len()).collect();
    ixs.sort_by(|&a, &b| {
        let (na, nb) = (h.node(a), h.node(b));
        (na.level, na.coord.0, na.coord.1, &na.path).cmp(&(nb.level, nb.coord.0, nb.coord.1, &nb.path))
    });
    let mut order = Vec::with_capacity(h.len());
    let mut level_of = Vec::with_capacity(h.len());
    let mut region_of = Vec::with_capacity(h.len());
    for ix in ixs {
        let node = h.node(ix);
        order.push(node.token_id);
        level_of.push(node.level);
        region_of.push(node.path[0]);
    }
    ScanOrder {
        scheme: ScanScheme::ResolutionOrdered,
        order,
        level_of,
        region_of,
    }
}

/// Half-open spans `(root_index, start, end)` tiling a region-nested
/// order, one per root, in emission order.
pub fn region_segments(s: &ScanOrder) -> Result<Vec<(u16, usize, usize)>> {
    if s.scheme != ScanScheme::RegionNested {
        return Err(Error::contract(
            "region_segments requires a region-nested scan order",
        ));
    }
    let mut out: Vec<(u16, usize, usize)> = Vec::new();
    for (pos, &region) in s.region_of.iter().enumerate() {
        match out.last_mut() {
            Some((r, _, end)) if *r == region => *end = pos + 1,
            _ => out.push((region, pos, pos + 1)),
        }
    }
    Ok(out)
}

/// Text dump: one line per position, `pos level path coord token_id region`.
pub fn format_scan_text(h: &PatchHierarchy, s: &ScanOrder) -> String {
    let mut out = String::new();
    for (pos, &tid) in s.order.iter().enumerate() {
        let node = h.node_of_token(tid).expect("order token belongs to hierarchy");
        out.push_str(&format!(
            "{pos} {} {} {},{} {tid} {}\n",
            node.level,
            format_path(&node.path),
            node.coord.0,
            node.coord.1,
            node.path[0]
        ));
    }
    out
}
