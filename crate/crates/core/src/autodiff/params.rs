use std::collections::HashMap;

use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};

/// Ordered set of trainable leaves.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    leaves: Vec<NodeId>,
    index: HashMap<NodeId, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a leaf. Non-leaves and duplicates are rejected.
    pub fn push(&mut self, graph: &Graph, leaf: NodeId) -> Result<()> {
        if !graph.is_leaf(leaf) {
            return Err(Error::config(format!(
                "{} is not a leaf",
                graph.label(leaf)
            )));
        }
        if self.index.contains_key(&leaf) {
            return Err(Error::config(format!(
                "{} registered twice",
                graph.label(leaf)
            )));
        }
        self.index.insert(leaf, self.leaves.len());
        self.leaves.push(leaf);
        Ok(())
    }

    pub fn extend(
        &mut self,
        graph: &Graph,
        leaves: impl IntoIterator<Item = NodeId>,
    ) -> Result<()> {
        leaves.into_iter().try_for_each(|l| self.push(graph, l))
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn position(&self, leaf: NodeId) -> Option<usize> {
        self.index.get(&leaf).copied()
    }

    /// Total number of scalar entries across all leaves.
    pub fn size(&self, graph: &Graph) -> usize {
        self.leaves
            .iter()
            .map(|&l| graph.stored_value(l).map_or(1, |m| m.len()))
            .sum()
    }

    /// Current values, flattened in the same order as [`Graph::gradient`].
    pub fn values(&self, graph: &Graph) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.size(graph));
        for &l in &self.leaves {
            match graph.stored_value(l) {
                Some(m) => out.extend(m.iter().copied()),
                None => out.push(0.0),
            }
        }
        out
    }

    /// Write flattened values back into the leaves.
    pub fn assign(&self, graph: &mut Graph, flat: &[f64]) -> Result<()> {
        if flat.len() != self.size(graph) {
            return Err(Error::config(format!(
                "expected {} parameter values, got {}",
                self.size(graph),
                flat.len()
            )));
        }
        let mut offset = 0;
        for &l in &self.leaves {
            let m = graph
                .stored_value_mut(l)
                .ok_or_else(|| Error::config("parameter leaf has no value"))?;
            for (dst, &src) in m.iter_mut().zip(&flat[offset..]) {
                *dst = src;
            }
            offset += m.len();
        }
        Ok(())
    }
}
