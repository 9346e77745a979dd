use super::graph::{Graph, NodeId, Op};

impl Graph {
    /// A node evaluating to ones in the shape of `node`, shared per node.
    pub fn ones_like(&mut self, node: NodeId) -> NodeId {
        if let Some(&id) = self.ones_like.get(&node) {
            return id;
        }
        let id = self.powi(node, 0);
        self.ones_like.insert(node, id);
        id
    }

    /// Build a new graph computing ∂output/∂wrt. The result is an ordinary node
    /// and can itself be differentiated. If `output` does not depend on `wrt`
    /// the result is the constant zero.
    ///
    /// For matrix-valued leaves the derivative is taken entry by entry against
    /// the same entry of `wrt` (a seed of ones), which is the exact partial for
    /// scalar leaves and for per-row coordinates.
    pub fn differentiate(&mut self, output: NodeId, wrt: NodeId) -> NodeId {
        let seed = self.ones_like(wrt);
        match self.tangent(output, wrt, seed) {
            Some(t) => t,
            None => self.scalar(0.0),
        }
    }

    /// Directional derivative of `output` as `wrt` moves along `seed`.
    /// `None` means the derivative is structurally zero.
    ///
    /// `seed` must broadcast against `wrt`; e.g. a constant unit row selects
    /// one column of a batched coordinate matrix.
    pub fn differentiate_along(
        &mut self,
        output: NodeId,
        wrt: NodeId,
        seed: NodeId,
    ) -> Option<NodeId> {
        self.tangent(output, wrt, seed)
    }

    /// Forward tangent propagation, memoised per (node, wrt, seed). Tangent
    /// values broadcast against their primal; they may be smaller (e.g. a
    /// single row) when the variation does not depend on the batch row.
    fn tangent(&mut self, root: NodeId, wrt: NodeId, seed: NodeId) -> Option<NodeId> {
        let key = |n: NodeId| (n, wrt, seed);
        // Explicit post-order traversal; derivative graphs can be deep.
        let mut stack: Vec<(NodeId, bool)> = vec![(root, false)];
        while let Some((n, expanded)) = stack.pop() {
            if self.tangents.contains_key(&key(n)) {
                continue;
            }
            if n == wrt {
                self.tangents.insert(key(n), Some(seed));
                continue;
            }
            if n < wrt {
                // Created before wrt, so it cannot depend on it.
                self.tangents.insert(key(n), None);
                continue;
            }
            let op = self.nodes[n.index()].op.clone();
            if !expanded {
                stack.push((n, true));
                for c in op.children() {
                    if !self.tangents.contains_key(&key(c)) {
                        stack.push((c, false));
                    }
                }
                continue;
            }
            let t = |g: &Graph, c: NodeId| g.tangents[&key(c)];
            let result = match op {
                Op::Constant | Op::Leaf => None,
                Op::Add(a, b) => {
                    let (ta, tb) = (t(self, a), t(self, b));
                    self.add_opt(ta, tb)
                }
                Op::Sub(a, b) => match (t(self, a), t(self, b)) {
                    (Some(x), Some(y)) => Some(self.sub(x, y)),
                    (Some(x), None) => Some(x),
                    (None, Some(y)) => Some(self.neg(y)),
                    (None, None) => None,
                },
                Op::Neg(a) => t(self, a).map(|x| self.neg(x)),
                Op::Mul(a, b) => {
                    let left = t(self, a).map(|x| self.mul(x, b));
                    let right = t(self, b).map(|y| self.mul(a, y));
                    self.add_opt(left, right)
                }
                Op::Div(a, b) => match (t(self, a), t(self, b)) {
                    (Some(x), Some(y)) => {
                        let qy = self.mul(n, y);
                        let num = self.sub(x, qy);
                        Some(self.div(num, b))
                    }
                    (Some(x), None) => Some(self.div(x, b)),
                    (None, Some(y)) => {
                        let qy = self.mul(n, y);
                        let r = self.div(qy, b);
                        Some(self.neg(r))
                    }
                    (None, None) => None,
                },
                Op::PowI(a, k) => match (t(self, a), k) {
                    (None, _) | (_, 0) => None,
                    (Some(x), 1) => Some(x),
                    (Some(x), 2) => {
                        let two = self.scalar(2.0);
                        let c = self.mul(two, a);
                        Some(self.mul(c, x))
                    }
                    (Some(x), k) => {
                        let kk = self.scalar(k as f64);
                        let p = self.powi(a, k - 1);
                        let c = self.mul(kk, p);
                        Some(self.mul(c, x))
                    }
                },
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let tx = t(self, input).map(|x| self.affine(x, weight, None));
                    let tw = t(self, weight).map(|w| self.affine(input, w, None));
                    let tb = bias.and_then(|b| t(self, b));
                    let s = self.add_opt(tx, tw);
                    self.add_opt(s, tb)
                }
                Op::Sum(a) => t(self, a).map(|x| {
                    // Expand a possibly smaller tangent to the primal's shape
                    // before reducing.
                    let ones = self.ones_like(a);
                    let full = self.mul(x, ones);
                    self.sum(full)
                }),
            };
            self.tangents.insert(key(n), result);
        }
        self.tangents[&key(root)]
    }

    fn add_opt(&mut self, a: Option<NodeId>, b: Option<NodeId>) -> Option<NodeId> {
        match (a, b) {
            (Some(x), Some(y)) => Some(self.add(x, y)),
            (x, None) => x,
            (None, y) => y,
        }
    }
}
