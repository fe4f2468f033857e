//! Instance-label smoothing on the patch grid and slide-level decisions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::SlideRule;
use crate::error::{Result, UmtlError};

/// 4-neighbour graph over the patches of one bag, with self-loops and
/// row-normalised weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGraph {
    pub positions: Vec<(usize, usize)>,
    /// Neighbours of each node, self included, in ascending node order.
    pub neighbors: Vec<Vec<usize>>,
}

impl SpatialGraph {
    pub fn new(positions: &[(usize, usize)]) -> Self {
        let index: HashMap<(usize, usize), usize> = positions.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let neighbors = positions
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let mut nb = vec![i];
                let cand = [
                    r.checked_sub(1).map(|r| (r, c)),
                    Some((r + 1, c)),
                    c.checked_sub(1).map(|c| (r, c)),
                    Some((r, c + 1)),
                ];
                nb.extend(cand.into_iter().flatten().filter_map(|p| index.get(&p).copied()));
                nb.sort_unstable();
                nb
            })
            .collect();
        SpatialGraph {
            positions: positions.to_vec(),
            neighbors,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Dense row-normalised adjacency with self-loops.
    pub fn adjacency(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        self.neighbors
            .iter()
            .map(|nb| {
                let mut row = vec![0.0; n];
                let w = 1.0 / nb.len() as f64;
                for &j in nb {
                    row[j] = w;
                }
                row
            })
            .collect()
    }

    /// One application of the normalised adjacency.
    pub fn propagate(&self, attrs: &[f64]) -> Vec<f64> {
        self.neighbors
            .iter()
            .map(|nb| nb.iter().map(|&j| attrs[j]).sum::<f64>() / nb.len() as f64)
            .collect()
    }
}

/// ℓ̂ = Aⁿ ℓ with identity squashing.
pub fn smooth(graph: &SpatialGraph, attrs: &[f64], hops: usize) -> Result<Vec<f64>> {
    if graph.is_empty() {
        return Err(UmtlError::EmptyBag("smoothing an empty graph".into()));
    }
    if attrs.len() != graph.len() {
        return Err(UmtlError::Shape(format!(
            "{} attributes for {} nodes",
            attrs.len(),
            graph.len()
        )));
    }
    let mut x = attrs.to_vec();
    for _ in 0..hops {
        x = graph.propagate(&x);
    }
    Ok(x)
}

/// Maximal 4-connected components of the flagged nodes, each sorted, listed
/// in order of their smallest node.
pub fn connected_components(graph: &SpatialGraph, flags: &[bool]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; graph.len()];
    let mut out = Vec::new();
    for start in 0..graph.len() {
        if !flags[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            comp.push(v);
            for &u in &graph.neighbors[v] {
                if flags[u] && !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Components of a set of grid positions, as indices into `positions`.
pub fn connected_components_on(positions: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let g = SpatialGraph::new(positions);
    connected_components(&g, &vec![true; positions.len()])
}

pub fn largest_component(graph: &SpatialGraph, flags: &[bool]) -> usize {
    connected_components(graph, flags).iter().map(Vec::len).max().unwrap_or(0)
}

/// Threshold applied to smoothed attributes before the component rule.
pub const SMOOTHED_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideDecision {
    pub label: u8,
    /// Positive count (count rule) or largest component size (component rule).
    pub score: f64,
    /// β_WSI·n
    pub required: f64,
}

/// Count rule on binary labels: Y = 1 iff Σℓ ≥ β_WSI·n.
pub fn count_decision(labels: &[u8], beta_wsi: f64) -> Result<SlideDecision> {
    if labels.is_empty() {
        return Err(UmtlError::EmptyBag("slide decision on an empty bag".into()));
    }
    let n = labels.len() as f64;
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let required = beta_wsi * n;
    Ok(SlideDecision {
        label: (positives >= required) as u8,
        score: positives,
        required,
    })
}

/// Component rule on smoothed attributes: threshold at 0.5, then Y = 1 iff
/// the largest positive 4-connected component exceeds β_WSI·n.
pub fn component_decision(graph: &SpatialGraph, smoothed: &[f64], beta_wsi: f64) -> Result<SlideDecision> {
    if graph.is_empty() {
        return Err(UmtlError::EmptyBag("slide decision on an empty bag".into()));
    }
    let flags: Vec<bool> = smoothed.iter().map(|&v| v >= SMOOTHED_THRESHOLD).collect();
    let largest = largest_component(graph, &flags) as f64;
    let required = beta_wsi * graph.len() as f64;
    Ok(SlideDecision {
        label: (largest > required) as u8,
        score: largest,
        required,
    })
}

/// Slide label from per-instance inputs. `labels` feed the count rule;
/// `attrs` are smoothed over `hops` and feed the component rule.
pub fn wsi_label(
    positions: &[(usize, usize)],
    labels: &[u8],
    attrs: &[f64],
    beta_wsi: f64,
    rule: SlideRule,
    hops: usize,
) -> Result<SlideDecision> {
    match rule {
        SlideRule::Count => count_decision(labels, beta_wsi),
        SlideRule::Component => {
            let g = SpatialGraph::new(positions);
            let s = smooth(&g, attrs, hops)?;
            component_decision(&g, &s, beta_wsi)
        }
    }
}

/// Min-max scaling to [0,1]; constant inputs map to zero.
pub fn minmax(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span.is_nan() || span <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / span).collect()
}
