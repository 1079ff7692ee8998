//! Feature hierarchies: parent gating, mutual exclusion, parent-scaled
//! magnitudes and base-probability compensation.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyConfig {
    pub n_roots: usize,
    pub branching: usize,
    pub max_depth: usize,
    #[serde(default = "yes")]
    pub mutually_exclusive: bool,
    #[serde(default = "yes")]
    pub parent_scaling: bool,
    #[serde(default)]
    pub feature_offset: usize,
}

fn yes() -> bool {
    true
}

impl HierarchyConfig {
    /// Nodes in `n_roots` complete trees: `n_roots · Σ_{l=0..=depth} b^l`.
    pub fn node_count(&self) -> usize {
        let mut per_level = self.n_roots;
        let mut total = 0usize;
        for _ in 0..=self.max_depth {
            total += per_level;
            per_level *= self.branching;
        }
        total
    }
}

/// A forest over the feature indices `0..n`. Features outside every tree
/// have no parent and no children.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyForest {
    parent: Vec<i32>,
    child_start: Vec<u32>,
    child_list: Vec<u32>,
    depth: Vec<u32>,
    me: Vec<bool>,
    scaled: Vec<bool>,
    /// `level_parents[l]` lists, ascending, the parents whose children sit
    /// at depth `l + 1`.
    level_parents: Vec<Vec<u32>>,
}

impl HierarchyForest {
    /// Complete `branching`-ary trees laid out level-major: all roots first
    /// (`offset..offset + n_roots`), then all depth-1 nodes, and so on, so the
    /// roots take the lowest (most frequent) indices. Child `q` of a level
    /// has parent `q / branching` on the level above.
    pub fn build(cfg: &HierarchyConfig, n: usize) -> Result<Self> {
        if cfg.n_roots == 0 || cfg.branching == 0 {
            return Err(config_err("hierarchy needs n_roots >= 1 and branching >= 1"));
        }
        let total = cfg.node_count();
        if cfg.feature_offset + total > n {
            return Err(config_err(format!(
                "hierarchy needs {total} features from offset {} but the model has {n}",
                cfg.feature_offset
            )));
        }
        let mut parent = vec![-1i32; n];
        let mut level_start = cfg.feature_offset;
        let mut level_len = cfg.n_roots;
        for _ in 0..cfg.max_depth {
            let next_start = level_start + level_len;
            let next_len = level_len * cfg.branching;
            for q in 0..next_len {
                parent[next_start + q] = (level_start + q / cfg.branching) as i32;
            }
            level_start = next_start;
            level_len = next_len;
        }
        let mut me = vec![false; n];
        let mut scaled = vec![false; n];
        for p in parent.iter().filter(|&&p| p >= 0) {
            me[*p as usize] = cfg.mutually_exclusive;
            scaled[*p as usize] = cfg.parent_scaling;
        }
        Self::from_parents(parent, me, scaled)
    }

    /// Build from a parent array (`-1` for none) and per-feature flags that
    /// apply when the feature acts as a parent.
    pub fn from_parents(parent: Vec<i32>, me: Vec<bool>, scaled: Vec<bool>) -> Result<Self> {
        let n = parent.len();
        if me.len() != n || scaled.len() != n {
            return Err(config_err("hierarchy flag arrays must have one entry per feature"));
        }
        for (i, &p) in parent.iter().enumerate() {
            if p < -1 || p >= n as i32 || p == i as i32 {
                return Err(config_err(format!("feature {i} has invalid parent {p}")));
            }
        }
        // depth by walking up; a walk longer than n means a cycle
        let mut depth = vec![u32::MAX; n];
        for i in 0..n {
            let mut path = Vec::new();
            let mut cur = i;
            while depth[cur] == u32::MAX {
                path.push(cur);
                if path.len() > n {
                    return Err(config_err(format!("hierarchy has a cycle through feature {i}")));
                }
                match parent[cur] {
                    -1 => {
                        depth[cur] = 0;
                        path.pop();
                        break;
                    }
                    p => cur = p as usize,
                }
            }
            let mut d = depth[cur];
            while let Some(node) = path.pop() {
                d += 1;
                depth[node] = d;
            }
        }
        let mut counts = vec![0u32; n + 1];
        for &p in parent.iter().filter(|&&p| p >= 0) {
            counts[p as usize + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let child_start = counts;
        let mut fill = child_start.clone();
        let mut child_list = vec![0u32; child_start[n] as usize];
        for (i, &p) in parent.iter().enumerate() {
            if p >= 0 {
                let slot = &mut fill[p as usize];
                child_list[*slot as usize] = i as u32;
                *slot += 1;
            }
        }
        let max_depth = depth.iter().copied().max().unwrap_or(0) as usize;
        let mut level_parents = vec![Vec::new(); max_depth];
        for i in 0..n {
            if child_start[i + 1] > child_start[i] {
                level_parents[depth[i] as usize].push(i as u32);
            }
        }
        Ok(Self {
            parent,
            child_start,
            child_list,
            depth,
            me,
            scaled,
            level_parents,
        })
    }

    pub fn n_features(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        (self.parent[i] >= 0).then(|| self.parent[i] as usize)
    }

    pub fn parents_raw(&self) -> &[i32] {
        &self.parent
    }

    pub fn children(&self, i: usize) -> &[u32] {
        &self.child_list[self.child_start[i] as usize..self.child_start[i + 1] as usize]
    }

    pub fn depth(&self, i: usize) -> usize {
        self.depth[i] as usize
    }

    pub fn is_me(&self, i: usize) -> bool {
        self.me[i]
    }

    pub fn is_scaled(&self, i: usize) -> bool {
        self.scaled[i]
    }

    pub fn me_flags(&self) -> &[bool] {
        &self.me
    }

    pub fn scale_flags(&self) -> &[bool] {
        &self.scaled
    }

    /// Features at depth `l + 1` for each `l`; together they partition the
    /// set of features that have a parent.
    pub fn levels(&self) -> Vec<Vec<u32>> {
        self.level_parents
            .iter()
            .map(|ps| ps.iter().flat_map(|&p| self.children(p as usize).iter().copied()).collect())
            .collect()
    }

    /// Number of features that belong to some tree.
    pub fn covered(&self) -> usize {
        (0..self.n_features())
            .filter(|&i| self.parent[i] >= 0 || !self.children(i).is_empty())
            .count()
    }

    pub fn n_edges(&self) -> usize {
        self.child_list.len()
    }

    /// Apply gating, mutual exclusion and parent scaling to one coefficient
    /// row, root to leaves. `mean_mags[p]` is the mean magnitude of parent
    /// `p`; `row_key` seeds the mutual-exclusion winners.
    pub fn apply_row(&self, c: &mut [f32], mean_mags: &[f32], row_key: u64) {
        let mut active: Vec<u32> = Vec::new();
        for level in &self.level_parents {
            for &p in level {
                let p = p as usize;
                let kids = self.children(p);
                let cp = c[p];
                if cp <= 0.0 {
                    for &k in kids {
                        c[k as usize] = 0.0;
                    }
                    continue;
                }
                if self.me[p] {
                    active.clear();
                    active.extend(kids.iter().copied().filter(|&k| c[k as usize] > 0.0));
                    if active.len() > 1 {
                        let win = active[rng::hashed_index(row_key, p as u64, active.len())];
                        for &k in &active {
                            if k != win {
                                c[k as usize] = 0.0;
                            }
                        }
                    }
                }
                if self.scaled[p] {
                    let factor = cp / mean_mags[p];
                    for &k in kids {
                        c[k as usize] *= factor;
                    }
                }
            }
        }
    }
}

/// Apply the hierarchy to every row of `c`; row `r` uses the mutual
/// exclusion key derived from `(seed, HIERARCHY, r)`.
pub fn apply_hierarchy(c: &mut Array2<f32>, forest: &HierarchyForest, mean_mags: &[f32], seed: u64) {
    c.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(r, mut row)| {
            let key = rng::stream_key(seed, &[domain::HIERARCHY, r as u64]);
            forest.apply_row(row.as_slice_mut().expect("row-major"), mean_mags, key);
        });
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensatedProbs {
    pub p_base: Vec<f64>,
    pub p_corrected: Vec<f64>,
    pub gamma_hier: Vec<f64>,
    pub gamma_me: Vec<f64>,
}

/// Raise base probabilities so that, to first order, effective rates after
/// gating and mutual exclusion match the base values. Corrections use the
/// parent's and siblings' base probabilities.
pub fn compensate_probs(p_base: &[f64], forest: &HierarchyForest) -> CompensatedProbs {
    let n = p_base.len();
    let mut gamma_hier = vec![1.0; n];
    let mut gamma_me = vec![1.0; n];
    for (i, g) in gamma_hier.iter_mut().enumerate() {
        if let Some(p) = forest.parent(i) {
            *g = 1.0 / p_base[p];
        }
    }
    for p in 0..n {
        if !forest.is_me(p) {
            continue;
        }
        let kids = forest.children(p);
        let total: f64 = kids.iter().map(|&k| p_base[k as usize]).sum();
        for &k in kids {
            gamma_me[k as usize] = 1.0 + (total - p_base[k as usize]) / p_base[p];
        }
    }
    let p_corrected = (0..n)
        .map(|i| (p_base[i] * gamma_hier[i] * gamma_me[i]).min(1.0))
        .collect();
    CompensatedProbs {
        p_base: p_base.to_vec(),
        p_corrected,
        gamma_hier,
        gamma_me,
    }
}
