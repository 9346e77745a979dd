use ndarray::{Array2, Axis};

use super::graph::{Graph, Matrix, NodeId, Op};
use super::params::ParamSet;
use crate::error::{Error, Result};

/// Values of every node needed to compute a set of roots.
#[derive(Debug)]
pub struct Evaluation {
    values: Vec<Option<Matrix>>,
}

impl Evaluation {
    pub fn get(&self, node: NodeId) -> Option<&Matrix> {
        self.values.get(node.index()).and_then(Option::as_ref)
    }

    pub fn scalar(&self, node: NodeId) -> Option<f64> {
        self.get(node)
            .and_then(|m| (m.len() == 1).then(|| m[[0, 0]]))
    }
}

fn broadcast_shape(a: &Matrix, b: &Matrix) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, _) => Some(y),
        (_, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.nrows(), b.nrows())?, dim(a.ncols(), b.ncols())?))
}

/// Sum `g` down to `shape` along the axes that were broadcast.
fn unbroadcast(g: Matrix, shape: (usize, usize)) -> Matrix {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Graph {
    /// Mark every node that `roots` depend on.
    fn needed(&self, roots: &[NodeId]) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = roots.to_vec();
        while let Some(n) = stack.pop() {
            if std::mem::replace(&mut mark[n.index()], true) {
                continue;
            }
            stack.extend(
                self.nodes[n.index()]
                    .op
                    .children()
                    .filter(|c| !mark[c.index()]),
            );
        }
        mark
    }

    /// Evaluate `roots`, substituting `overrides` for the stored values of the
    /// given leaves. Only nodes the roots depend on are computed.
    pub fn forward(&self, roots: &[NodeId], overrides: &[(NodeId, &Matrix)]) -> Result<Evaluation> {
        let mark = self.needed(roots);
        let mut values: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if !mark[i] {
                continue;
            }
            let id = NodeId(i as u32);
            let v = |c: NodeId| values[c.index()].as_ref().expect("child evaluated first");
            let value = match node.op {
                Op::Constant | Op::Leaf => {
                    let over = overrides.iter().find(|(n, _)| *n == id).map(|(_, m)| *m);
                    match over.or(node.value.as_ref()) {
                        Some(m) => m.clone(),
                        None => {
                            return Err(Error::Domain {
                                node: self.label(id),
                                message: "leaf has no assigned value".into(),
                            })
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    let (x, y) = (v(a), v(b));
                    if broadcast_shape(x, y).is_none() {
                        return Err(Error::Domain {
                            node: self.label(id),
                            message: format!(
                                "incompatible operand shapes {:?} and {:?}",
                                x.dim(),
                                y.dim()
                            ),
                        });
                    }
                    match node.op {
                        Op::Add(..) => x + y,
                        Op::Sub(..) => x - y,
                        Op::Mul(..) => x * y,
                        _ => {
                            if y.iter().any(|&d| d == 0.0) {
                                return Err(Error::Domain {
                                    node: self.label(id),
                                    message: "division by zero".into(),
                                });
                            }
                            x / y
                        }
                    }
                }
                Op::Neg(a) => -v(a),
                Op::PowI(a, n) => match n {
                    0 => Array2::ones(v(a).dim()),
                    1 => v(a).clone(),
                    2 => v(a).mapv(|x| x * x),
                    3 => v(a).mapv(|x| x * x * x),
                    _ => v(a).mapv(|x| x.powi(n as i32)),
                },
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let (x, w) = (v(input), v(weight));
                    if x.ncols() != w.ncols() {
                        return Err(Error::Domain {
                            node: self.label(id),
                            message: format!(
                                "affine input has {} columns but weight is {:?}",
                                x.ncols(),
                                w.dim()
                            ),
                        });
                    }
                    let mut out = x.dot(&w.t());
                    if let Some(b) = bias {
                        let b = v(b);
                        if b.dim() != (1, w.nrows()) {
                            return Err(Error::Domain {
                                node: self.label(id),
                                message: format!(
                                    "bias shape {:?} does not match weight {:?}",
                                    b.dim(),
                                    w.dim()
                                ),
                            });
                        }
                        out += b;
                    }
                    out
                }
                Op::Sum(a) => Array2::from_elem((1, 1), v(a).sum()),
            };
            values[i] = Some(value);
        }
        Ok(Evaluation { values })
    }

    /// Value of a single node.
    pub fn evaluate(&self, node: NodeId) -> Result<Matrix> {
        let mut eval = self.forward(&[node], &[])?;
        Ok(eval.values[node.index()].take().expect("root evaluated"))
    }

    /// Value of a node that must be 1×1.
    pub fn evaluate_scalar(&self, node: NodeId) -> Result<f64> {
        let m = self.evaluate(node)?;
        if m.len() != 1 {
            return Err(Error::Domain {
                node: self.label(node),
                message: format!("expected a scalar, found shape {:?}", m.dim()),
            });
        }
        Ok(m[[0, 0]])
    }

    /// Reverse-mode adjoints of `root` (seeded with ones, i.e. the gradient of
    /// the sum of its entries) for each parameter. `None` marks a parameter
    /// the root does not depend on.
    pub fn backward(
        &self,
        eval: &Evaluation,
        root: NodeId,
        params: &ParamSet,
    ) -> Vec<Option<Matrix>> {
        let n = self.nodes.len();
        let mut reach = vec![false; n];
        for &p in params.leaves() {
            reach[p.index()] = true;
        }
        for i in 0..=root.index() {
            if !reach[i] && eval.values[i].is_some() {
                reach[i] = self.nodes[i].op.children().any(|c| reach[c.index()]);
            }
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; n];
        if !reach[root.index()] {
            return params.leaves().iter().map(|_| None).collect();
        }
        let root_value = eval.get(root).expect("root evaluated");
        adj[root.index()] = Some(Array2::ones(root_value.dim()));

        let val = |c: NodeId| eval.values[c.index()].as_ref().expect("evaluated");
        for i in (0..=root.index()).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let op = &self.nodes[i].op;
            let send = |adj: &mut Vec<Option<Matrix>>, c: NodeId, contrib: Matrix| {
                if reach[c.index()] {
                    let shape = val(c).dim();
                    accumulate(&mut adj[c.index()], unbroadcast(contrib, shape));
                }
            };
            match *op {
                Op::Constant | Op::Leaf => {
                    // Parameters keep their adjoint.
                    adj[i] = Some(g);
                }
                Op::Add(a, b) => {
                    if reach[b.index()] {
                        send(&mut adj, b, g.clone());
                    }
                    send(&mut adj, a, g);
                }
                Op::Sub(a, b) => {
                    if reach[b.index()] {
                        send(&mut adj, b, -&g);
                    }
                    send(&mut adj, a, g);
                }
                Op::Neg(a) => send(&mut adj, a, -g),
                Op::Mul(a, b) => {
                    if reach[a.index()] {
                        send(&mut adj, a, &g * val(b));
                    }
                    if reach[b.index()] {
                        send(&mut adj, b, &g * val(a));
                    }
                }
                Op::Div(a, b) => {
                    let denom = val(b);
                    let ga = &g / denom;
                    if reach[b.index()] {
                        let q = val(NodeId(i as u32));
                        send(&mut adj, b, -(&ga * q));
                    }
                    if reach[a.index()] {
                        send(&mut adj, a, ga);
                    }
                }
                Op::PowI(a, k) => {
                    if k > 0 {
                        let x = val(a);
                        let d = match k {
                            1 => g,
                            2 => &g * &x.mapv(|x| 2.0 * x),
                            _ => &g * &x.mapv(|x| k as f64 * x.powi(k as i32 - 1)),
                        };
                        send(&mut adj, a, d);
                    }
                }
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let x = val(input);
                    let w = val(weight);
                    if reach[input.index()] {
                        send(&mut adj, input, g.dot(w));
                    }
                    if reach[weight.index()] {
                        let gw = if x.nrows() == g.nrows() {
                            g.t().dot(x)
                        } else {
                            g.sum_axis(Axis(0)).insert_axis(Axis(1)).dot(x)
                        };
                        send(&mut adj, weight, gw);
                    }
                    if let Some(b) = bias {
                        if reach[b.index()] {
                            send(&mut adj, b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                        }
                    }
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    send(&mut adj, a, Array2::from_elem(val(a).dim(), s));
                }
            }
        }
        params
            .leaves()
            .iter()
            .map(|p| adj[p.index()].take())
            .collect()
    }

    /// Flattened gradient of a scalar output with respect to every parameter,
    /// each leaf's entries in row-major order, leaves in `params` order.
    pub fn gradient(&self, output: NodeId, params: &ParamSet) -> Result<Vec<f64>> {
        if params.is_empty() {
            return Ok(Vec::new());
        }
        let eval = self.forward(&[output], &[])?;
        self.gradient_from(&eval, output, params)
    }

    /// Like [`Graph::gradient`] but reusing an existing forward evaluation.
    pub fn gradient_from(
        &self,
        eval: &Evaluation,
        output: NodeId,
        params: &ParamSet,
    ) -> Result<Vec<f64>> {
        let out = eval.get(output).expect("output evaluated");
        if out.len() != 1 {
            return Err(Error::Domain {
                node: self.label(output),
                message: format!(
                    "gradient needs a scalar output, found shape {:?}",
                    out.dim()
                ),
            });
        }
        let adj = self.backward(eval, output, params);
        let mut flat = Vec::with_capacity(params.size(self));
        for (&p, g) in params.leaves().iter().zip(adj) {
            match g {
                Some(g) => flat.extend(g.iter().copied()),
                None => {
                    let len = self.stored_value(p).map_or(1, |m| m.len());
                    flat.extend(std::iter::repeat(0.0).take(len));
                }
            }
        }
        Ok(flat)
    }
}
