use std::collections::HashMap;
use std::fmt;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Dense row-major matrix used for every node value. Rows index points in a
/// batch, columns index features.
pub type Matrix = Array2<f64>;

/// Handle to a node inside a [`Graph`].
///
/// Node ids are assigned in creation order and every operation only refers to
/// nodes created before it, so ascending id order is a topological order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// The closed operation set of the engine.
///
/// Binary element-wise operations broadcast: a dimension of size one stretches
/// to match the other operand.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Constant,
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Element-wise integer power; `x^0` is one everywhere.
    PowI(NodeId, u32),
    /// `input · weightᵀ + bias`, with `weight` shaped (outputs × inputs) and
    /// `bias` a single row.
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    /// Sum of every entry, producing a 1×1 value.
    Sum(NodeId),
}

impl Op {
    pub fn children(&self) -> impl Iterator<Item = NodeId> {
        let slots: [Option<NodeId>; 3] = match *self {
            Op::Constant | Op::Leaf => [None, None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                [Some(a), Some(b), None]
            }
            Op::Neg(a) | Op::PowI(a, _) | Op::Sum(a) => [Some(a), None, None],
            Op::Affine {
                input,
                weight,
                bias,
            } => [Some(input), Some(weight), bias],
        };
        slots.into_iter().flatten()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Option<Matrix>,
    pub(crate) name: Option<String>,
}

/// An append-only computational graph.
///
/// Leaves carry assignable values; everything else is derived. The graph is
/// immutable apart from leaf assignment and appending new nodes, which is
/// what [`Graph::differentiate`] does: derivative graphs are new nodes that
/// share structure with the original.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) tangents: HashMap<(NodeId, NodeId, NodeId), Option<NodeId>>,
    pub(crate) ones_like: HashMap<NodeId, NodeId>,
    scalars: HashMap<u64, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Option<Matrix>, name: Option<String>) -> NodeId {
        debug_assert!(op.children().all(|c| c.index() < self.nodes.len()));
        let id = NodeId(u32::try_from(self.nodes.len()).expect("graph exceeds u32 nodes"));
        self.nodes.push(Node { op, value, name });
        id
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node.index()].op
    }

    /// Human-readable label used in diagnostics.
    pub fn label(&self, node: NodeId) -> String {
        match &self.nodes[node.index()].name {
            Some(name) => format!("{node} ({name})"),
            None => format!("{node} ({})", op_name(&self.nodes[node.index()].op)),
        }
    }

    pub fn name(&self, node: NodeId) -> Option<&str> {
        self.nodes[node.index()].name.as_deref()
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, Some(value), None)
    }

    /// A 1×1 constant. Repeated requests for the same value share one node.
    pub fn scalar(&mut self, value: f64) -> NodeId {
        if let Some(&id) = self.scalars.get(&value.to_bits()) {
            return id;
        }
        let id = self.constant(Array2::from_elem((1, 1), value));
        self.scalars.insert(value.to_bits(), id);
        id
    }

    pub fn leaf(&mut self, name: impl Into<String>, value: Matrix) -> NodeId {
        self.push(Op::Leaf, Some(value), Some(name.into()))
    }

    pub fn scalar_leaf(&mut self, name: impl Into<String>, value: f64) -> NodeId {
        self.leaf(name, Array2::from_elem((1, 1), value))
    }

    /// A leaf whose value must be assigned (or overridden) before evaluation.
    pub fn placeholder(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf, None, Some(name.into()))
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        matches!(self.nodes[node.index()].op, Op::Leaf)
    }

    pub fn set_value(&mut self, leaf: NodeId, value: Matrix) -> Result<()> {
        if !self.is_leaf(leaf) {
            return Err(Error::config(format!(
                "cannot assign a value to non-leaf node {}",
                self.label(leaf)
            )));
        }
        self.nodes[leaf.index()].value = Some(value);
        Ok(())
    }

    pub fn set_scalar(&mut self, leaf: NodeId, value: f64) -> Result<()> {
        self.set_value(leaf, Array2::from_elem((1, 1), value))
    }

    /// Stored value of a leaf or constant.
    pub fn stored_value(&self, node: NodeId) -> Option<&Matrix> {
        self.nodes[node.index()].value.as_ref()
    }

    pub(crate) fn stored_value_mut(&mut self, node: NodeId) -> Option<&mut Matrix> {
        self.nodes[node.index()].value.as_mut()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b), None, None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b), None, None)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a), None, None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b), None, None)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b), None, None)
    }

    pub fn powi(&mut self, a: NodeId, exponent: u32) -> NodeId {
        self.push(Op::PowI(a, exponent), None, None)
    }

    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> NodeId {
        self.push(
            Op::Affine {
                input,
                weight,
                bias,
            },
            None,
            None,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), None, None)
    }

    /// Attach a diagnostic name to an interior node.
    pub fn set_name(&mut self, node: NodeId, name: impl Into<String>) {
        self.nodes[node.index()].name = Some(name.into());
    }

    /// Sum of a non-empty list of nodes, folded left to right.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Option<NodeId> {
        let (&first, rest) = terms.split_first()?;
        Some(rest.iter().fold(first, |acc, &t| self.add(acc, t)))
    }
}

pub(crate) fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Neg(..) => "neg",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::PowI(..) => "powi",
        Op::Affine { .. } => "affine",
        Op::Sum(..) => "sum",
    }
}
