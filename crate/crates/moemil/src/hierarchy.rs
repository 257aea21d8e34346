//! Multi-resolution patch hierarchy.
//!
//! Levels run 1..=R with 1 the coarsest. A node's `path` lists child
//! indices from its root region, so `path.len() == level`. Sibling order
//! is ascending child index; for generated data child indices follow
//! raster order of the coordinates at that level.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchNode {
    /// Resolution level in `1..=R` (1 = coarsest).
    pub level: u8,
    /// Child indices from the root region; `path.len() == level`.
    pub path: Vec<u16>,
    /// Grid position at this node's level.
    pub coord: (u16, u16),
    /// Index into the bag's feature rows; unique within a bag.
    pub token_id: usize,
}

pub fn format_path(path: &[u16]) -> String {
    path.iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(".")
}

#[derive(Debug, Clone)]
pub struct PatchHierarchy {
    levels: u8,
    nodes: Vec<PatchNode>,
    /// Node indices of level-1 nodes, ascending root index.
    roots: Vec<usize>,
    /// Per node, child node indices ascending by child index.
    children: Vec<Vec<usize>>,
    /// token_id -> node index.
    token_to_node: BTreeMap<usize, usize>,
}

impl PatchHierarchy {
    pub fn levels(&self) -> u8 {
        self.levels
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, ix: usize) -> &PatchNode {
        &self.nodes[ix]
    }

    pub fn nodes(&self) -> &[PatchNode] {
        &self.nodes
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn children(&self, ix: usize) -> &[usize] {
        &self.children[ix]
    }

    pub fn node_of_token(&self, token_id: usize) -> Option<&PatchNode> {
        self.token_to_node.get(&token_id).map(|&ix| &self.nodes[ix])
    }
}

/// Builds and validates a hierarchy from flat records.
///
/// Every non-root's parent path must be present, paths must be unique,
/// and levels must lie in `1..=levels`.
pub fn build_hierarchy(records: Vec<PatchNode>, levels: u8) -> Result<PatchHierarchy> {
    if levels == 0 {
        return Err(Error::contract("hierarchy needs at least one level"));
    }
    // BTreeMap keyed by path: lexicographic order gives ascending sibling
    // and root order for free.
    let mut by_path: BTreeMap<Vec<u16>, usize> = BTreeMap::new();
    let mut seen_tokens: BTreeMap<usize, usize> = BTreeMap::new();
    for (ix, rec) in records.iter().enumerate() {
        if rec.level == 0 || rec.level > levels {
            return Err(Error::Structure(format!(
                "node {} has level {} outside 1..={levels}",
                format_path(&rec.path),
                rec.level
            )));
        }
        if rec.path.len() != rec.level as usize {
            return Err(Error::Structure(format!(
                "node {} has level {} but a path of length {}",
                format_path(&rec.path),
                rec.level,
                rec.path.len()
            )));
        }
        if by_path.insert(rec.path.clone(), ix).is_some() {
            return Err(Error::Structure(format!(
                "duplicate path {}",
                format_path(&rec.path)
            )));
        }
        if let Some(prev) = seen_tokens.insert(rec.token_id, ix) {
            return Err(Error::Structure(format!(
                "token id {} used by both {} and {}",
                rec.token_id,
                format_path(&records[prev].path),
                format_path(&rec.path)
            )));
        }
    }

    let mut roots = Vec::new();
    let mut children = vec![Vec::new(); records.len()];
    for (path, &ix) in &by_path {
        if path.len() == 1 {
            roots.push(ix);
        } else {
            let parent_path = &path[..path.len() - 1];
            match by_path.get(parent_path) {
                Some(&pix) => children[pix].push(ix),
                None => {
                    return Err(Error::Structure(format!(
                        "orphan node {}: parent {} is absent",
                        format_path(path),
                        format_path(parent_path)
                    )))
                }
            }
        }
    }

    let token_to_node = records
        .iter()
        .enumerate()
        .map(|(ix, r)| (r.token_id, ix))
        .collect();

    Ok(PatchHierarchy {
        levels,
        nodes: records,
        roots,
        children,
        token_to_node,
    })
}
