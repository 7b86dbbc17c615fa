//! Directed top-k similarity graph used for navigation and coverage.
//!
//! Each node keeps at most `k` outgoing edges to its most similar nodes with
//! strictly positive cosine, ordered by weight descending and then by id.
//! Inserts touch only the lists the new node enters; removals rebuild only
//! the lists that lost an edge.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::unit_cosine;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphLevel {
    Theme,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub to: String,
    pub weight: f64,
}

/// Edge order: heavier first, then lower id.
fn edge_order(a_w: f64, a_id: &str, b_w: f64, b_id: &str) -> Ordering {
    b_w.total_cmp(&a_w).then_with(|| a_id.cmp(b_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavGraph {
    pub level: GraphLevel,
    k: usize,
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    adjacency: BTreeMap<String, Vec<Edge>>,
}

impl NavGraph {
    pub fn new(level: GraphLevel, k: usize, dim: usize) -> Self {
        NavGraph {
            level,
            k,
            dim,
            vectors: BTreeMap::new(),
            adjacency: BTreeMap::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.vectors.keys()
    }

    pub fn vector(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    /// Edge weight `id -> to`, if that edge is stored.
    pub fn weight(&self, id: &str, to: &str) -> Option<f64> {
        self.adjacency
            .get(id)?
            .iter()
            .find(|e| e.to == to)
            .map(|e| e.weight)
    }

    fn top_k_for(&self, id: &str, v: &[f64]) -> Vec<Edge> {
        let mut cands: Vec<Edge> = self
            .vectors
            .iter()
            .filter(|(other, _)| other.as_str() != id)
            .map(|(other, w)| Edge {
                to: other.clone(),
                weight: unit_cosine(v, w).min(1.0),
            })
            .filter(|e| e.weight > 0.0)
            .collect();
        cands.sort_by(|a, b| edge_order(a.weight, &a.to, b.weight, &b.to));
        cands.truncate(self.k);
        cands
    }

    /// Inserts a node, or refreshes it when the id already exists (as after
    /// a centroid change).
    pub fn upsert_node(&mut self, id: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if self.vectors.contains_key(id) {
            self.remove_node(id)?;
        }
        let own = self.top_k_for(id, &vector);
        for (other, ov) in &self.vectors {
            let w = unit_cosine(ov, &vector).min(1.0);
            if w <= 0.0 {
                continue;
            }
            let list = self
                .adjacency
                .get_mut(other)
                .expect("every node has a list");
            let enters = list.len() < self.k
                || list
                    .last()
                    .is_some_and(|worst| edge_order(w, id, worst.weight, &worst.to).is_lt());
            if enters {
                let pos = list
                    .iter()
                    .position(|e| edge_order(w, id, e.weight, &e.to).is_lt())
                    .unwrap_or(list.len());
                list.insert(
                    pos,
                    Edge {
                        to: id.to_string(),
                        weight: w,
                    },
                );
                list.truncate(self.k);
            }
        }
        self.vectors.insert(id.to_string(), vector);
        self.adjacency.insert(id.to_string(), own);
        Ok(())
    }

    pub fn remove_node(&mut self, id: &str) -> Result<()> {
        if self.vectors.remove(id).is_none() {
            return Err(Error::UnknownId(id.to_string()));
        }
        self.adjacency.remove(id);
        let affected: Vec<String> = self
            .adjacency
            .iter()
            .filter(|(_, list)| list.iter().any(|e| e.to == id))
            .map(|(n, _)| n.clone())
            .collect();
        for n in affected {
            let v = self.vectors[&n].clone();
            let rebuilt = self.top_k_for(&n, &v);
            self.adjacency.insert(n, rebuilt);
        }
        Ok(())
    }

    /// Stored out-neighbourhood of `id`, heaviest first.
    pub fn neighborhood(&self, id: &str) -> Result<&[Edge]> {
        self.adjacency
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.values().map(Vec::len).collect()
    }

    /// Top-k lists recomputed from scratch for every node.
    pub fn brute_force_adjacency(&self) -> BTreeMap<String, Vec<Edge>> {
        self.vectors
            .iter()
            .map(|(id, v)| (id.clone(), self.top_k_for(id, v)))
            .collect()
    }

    pub fn adjacency(&self) -> &BTreeMap<String, Vec<Edge>> {
        &self.adjacency
    }
}
