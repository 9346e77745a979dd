//! Fully connected surrogate networks with trainable (3,2) rational activations.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, NodeId};
use crate::error::{Error, Result};

/// `(a3 x³ + a2 x² + a1 x + a0) / (b2 x² + b1 x + b0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationalActivation {
    pub numerator: [f64; 4],
    pub denominator: [f64; 3],
}

impl RationalActivation {
    /// Best uniform (3,2) approximation of `max(0, x)` on [-1, 1]. Produced
    /// offline by a Remez-style minimax fit; the odd part is exactly `x/2`.
    pub const RAMP: Self = Self {
        numerator: [
            1.1914878839184095,
            1.5957439419508392,
            0.5,
            0.02184450634433343,
        ],
        denominator: [2.382975767836819, 0.0, 1.0],
    };

    /// Maximum deviation of [`Self::RAMP`] from the ramp on [-1, 1].
    pub const RAMP_MAX_ERROR: f64 = 0.021844506344333;

    pub const IDENTITY: Self = Self {
        numerator: [0.0, 0.0, 1.0, 0.0],
        denominator: [0.0, 0.0, 1.0],
    };

    pub fn eval(&self, x: f64) -> Result<f64> {
        let [a3, a2, a1, a0] = self.numerator;
        let [b2, b1, b0] = self.denominator;
        let den = (b2 * x + b1) * x + b0;
        if den == 0.0 {
            return Err(Error::Domain {
                node: "rational activation".into(),
                message: format!("denominator vanishes at x = {x}"),
            });
        }
        Ok((((a3 * x + a2) * x + a1) * x + a0) / den)
    }

    fn coefficients(&self) -> [f64; 7] {
        let [a3, a2, a1, a0] = self.numerator;
        let [b2, b1, b0] = self.denominator;
        [a3, a2, a1, a0, b2, b1, b0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `1 + n_D`: time plus spatial dimensions.
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub units: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_layers: usize, units: usize) -> Self {
        Self {
            input_dim,
            hidden_layers,
            units,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_layers == 0 || self.units == 0 {
            return Err(Error::config(format!(
                "network needs at least one input, one hidden layer and one unit per layer, got {self:?}"
            )));
        }
        Ok(())
    }

    /// (outputs, inputs) of each affine layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.units, self.input_dim)];
        shapes.extend((1..self.hidden_layers).map(|_| (self.units, self.units)));
        shapes.push((1, self.units));
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(o, i)| o * i + o)
            .sum::<usize>()
            + 7 * self.hidden_layers
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Shape (outputs, inputs).
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Network parameters. Bind into a [`Graph`] to evaluate or differentiate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub architecture: Architecture,
    pub seed: u64,
    /// Affine layers, output layer last.
    pub layers: Vec<Layer>,
    /// One activation per hidden layer.
    pub activations: Vec<RationalActivation>,
    /// Optional box the inputs are mapped from onto [-1, 1] before the
    /// first layer. This is a fixed change of variables, not a parameter.
    #[serde(default)]
    pub input_bounds: Option<(Vec<f64>, Vec<f64>)>,
}

/// Graph handles of a bound network.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub input: NodeId,
    pub output: NodeId,
    /// Trainable leaves in a stable order: per hidden layer weight, bias and
    /// the seven activation coefficients, then the output weight and bias.
    pub params: Vec<NodeId>,
    weights: Vec<(NodeId, NodeId)>,
    activations: Vec<[NodeId; 7]>,
}

impl Network {
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| {
                let bound = glorot_bound(inp, out);
                Layer {
                    weight: (0..out)
                        .map(|_| (0..inp).map(|_| rng.random_range(-bound..=bound)).collect())
                        .collect(),
                    bias: vec![0.0; out],
                }
            })
            .collect();
        Ok(Self {
            architecture: arch,
            seed,
            layers,
            activations: vec![RationalActivation::RAMP; arch.hidden_layers],
            input_bounds: None,
        })
    }

    pub fn with_input_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let d = self.architecture.input_dim;
        if lower.len() != d || upper.len() != d || lower.iter().zip(&upper).any(|(l, u)| !(u > l)) {
            return Err(Error::config(format!(
                "input bounds must be {d} increasing intervals, got {lower:?}..{upper:?}"
            )));
        }
        self.input_bounds = Some((lower, upper));
        Ok(self)
    }

    pub fn parameter_count(&self) -> usize {
        self.architecture.parameter_count()
    }

    /// Build the network on top of `input` (rows are points, columns are
    /// `(t, x, ...)`).
    pub fn bind(&self, g: &mut Graph, input: NodeId) -> Result<BoundNetwork> {
        self.check_shapes()?;
        let d = self.architecture.input_dim;
        if let Some(v) = g.stored_value(input) {
            if v.ncols() != d {
                return Err(Error::config(format!(
                    "network expects {d} input coordinates, got {}",
                    v.ncols()
                )));
            }
        }
        let mut h = input;
        if let Some((lo, hi)) = &self.input_bounds {
            let scale =
                Array2::from_shape_fn(
                    (d, d),
                    |(i, j)| if i == j { 2.0 / (hi[i] - lo[i]) } else { 0.0 },
                );
            let shift = Array2::from_shape_fn((1, d), |(_, j)| -(hi[j] + lo[j]) / (hi[j] - lo[j]));
            let s = g.constant(scale);
            let c = g.constant(shift);
            h = g.affine(h, s, Some(c));
        }
        let mut params = Vec::new();
        let mut weights = Vec::new();
        let mut activations = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = g.leaf(format!("layer{l}.weight"), to_matrix(&layer.weight));
            let b = g.leaf(
                format!("layer{l}.bias"),
                Array2::from_shape_vec((1, layer.bias.len()), layer.bias.clone())
                    .expect("bias row"),
            );
            params.extend([w, b]);
            weights.push((w, b));
            h = g.affine(h, w, Some(b));
            if l < last {
                let act = &self.activations[l];
                let names = ["a3", "a2", "a1", "a0", "b2", "b1", "b0"];
                let c: [NodeId; 7] = std::array::from_fn(|k| {
                    g.scalar_leaf(format!("layer{l}.act.{}", names[k]), act.coefficients()[k])
                });
                params.extend(c);
                activations.push(c);
                h = rational(g, h, &c, l);
            }
        }
        Ok(BoundNetwork {
            input,
            output: h,
            params,
            weights,
            activations,
        })
    }

    /// Copy parameter values back from a graph the network was bound into.
    pub fn read_back(&mut self, g: &Graph, bound: &BoundNetwork) {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&bound.weights) {
            let wv = g.stored_value(w).expect("weight leaf");
            layer.weight = wv.rows().into_iter().map(|r| r.to_vec()).collect();
            layer.bias = g
                .stored_value(b)
                .expect("bias leaf")
                .iter()
                .copied()
                .collect();
        }
        for (act, c) in self.activations.iter_mut().zip(&bound.activations) {
            let v: [f64; 7] =
                std::array::from_fn(|k| g.stored_value(c[k]).expect("coefficient leaf")[[0, 0]]);
            act.numerator = [v[0], v[1], v[2], v[3]];
            act.denominator = [v[4], v[5], v[6]];
        }
    }

    /// Network output at each row of `points`.
    pub fn predict(&self, points: &Matrix) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.leaf("X", points.clone());
        let bound = self.bind(&mut g, x)?;
        Ok(g.evaluate(bound.output)?.iter().copied().collect())
    }

    fn check_shapes(&self) -> Result<()> {
        self.architecture.validate()?;
        let shapes = self.architecture.layer_shapes();
        let ok = self.layers.len() == shapes.len()
            && self.activations.len() == self.architecture.hidden_layers
            && self.layers.iter().zip(&shapes).all(|(l, &(o, i))| {
                l.weight.len() == o && l.weight.iter().all(|r| r.len() == i) && l.bias.len() == o
            });
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "network layer shapes do not match its architecture",
            ))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let net: Self = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        net.check_shapes()?;
        Ok(net)
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    let cols = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j])
}

/// Horner-form rational activation applied element-wise.
fn rational(g: &mut Graph, z: NodeId, c: &[NodeId; 7], layer: usize) -> NodeId {
    let [a3, a2, a1, a0, b2, b1, b0] = *c;
    let mut num = g.mul(a3, z);
    num = g.add(num, a2);
    num = g.mul(num, z);
    num = g.add(num, a1);
    num = g.mul(num, z);
    num = g.add(num, a0);
    let mut den = g.mul(b2, z);
    den = g.add(den, b1);
    den = g.mul(den, z);
    den = g.add(den, b0);
    let out = g.div(num, den);
    g.set_name(out, format!("layer{layer}.activation"));
    out
}
