//! Data, collocation and reweighted L^p losses, and collocation-point
//! management.
//!
//! The loss graph is built once per training phase. Point sets are fed in
//! fixed-size chunks by overriding the coordinate leaf, so a single graph
//! serves every epoch and every batch size.

use std::io::Write as _;
use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;

use crate::autodiff::{Evaluation, Graph, Matrix, NodeId, ParamSet};
use crate::data::ProblemDomain;
use crate::error::{Error, Result};
use crate::rational_net::{BoundNetwork, Network};
use crate::term_library::{evaluate_terms, EvalPlan, Library, TermNodes};

/// IRLS weight `1 / max(δ, |ξ|^(2−p))`.
pub fn lp_weight(xi: f64, p: f64, delta: f64) -> f64 {
    1.0 / delta.max(xi.abs().powf(2.0 - p))
}

/// The trainable coefficient vector ξ with its active mask and IRLS weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientVector {
    pub values: Vec<f64>,
    pub active: Vec<bool>,
    pub weights: Vec<f64>,
    pub p: f64,
    pub delta: f64,
}

impl CoefficientVector {
    /// All-zero, all-active vector of length `k`.
    pub fn zeros(k: usize, p: f64, delta: f64) -> Result<Self> {
        if !(p > 0.0 && p < 2.0) {
            return Err(Error::config(format!("p must lie in (0, 2), got {p}")));
        }
        if !(delta > 0.0) {
            return Err(Error::config(format!(
                "delta must be positive, got {delta}"
            )));
        }
        let mut xi = Self {
            values: vec![0.0; k],
            active: vec![true; k],
            weights: vec![0.0; k],
            p,
            delta,
        };
        xi.update_weights();
        Ok(xi)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.active[k]).collect()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Recompute the IRLS weights from the current values.
    pub fn update_weights(&mut self) {
        for k in 0..self.len() {
            self.weights[k] = lp_weight(self.values[k], self.p, self.delta);
        }
    }

    /// `Σ a_k ξ_k²` over active terms with the stored weights.
    pub fn lp_loss(&self) -> f64 {
        self.active_indices()
            .iter()
            .map(|&k| self.weights[k] * self.values[k] * self.values[k])
            .sum()
    }

    /// `Σ |ξ_k|^p` over active terms.
    pub fn lp_metric(&self) -> f64 {
        self.active_indices()
            .iter()
            .map(|&k| self.values[k].abs().powf(self.p))
            .sum()
    }

    /// Deactivate entries below `threshold` and zero them. Returns the
    /// indices pruned by this call.
    pub fn prune(&mut self, threshold: f64) -> Vec<usize> {
        let mut pruned = Vec::new();
        for k in 0..self.len() {
            if self.active[k] && self.values[k].abs() < threshold {
                self.active[k] = false;
                self.values[k] = 0.0;
                pruned.push(k);
            }
        }
        pruned
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub data: f64,
    pub coll: f64,
    pub lp: f64,
}

/// Component losses of one evaluation and their weighted total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub data: Vec<f64>,
    pub coll: Vec<f64>,
    pub lp: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.weights.data * self.data.iter().sum::<f64>()
            + self.weights.coll * self.coll.iter().sum::<f64>()
            + self.weights.lp * self.lp
    }
}

/// `n` points uniform on `(0, t_max] × Ω`, one per row.
pub fn sample_random_collocation<R: Rng>(
    domain: &ProblemDomain,
    n: usize,
    rng: &mut R,
) -> Result<Matrix> {
    domain.validate()?;
    if n == 0 {
        return Err(Error::config("need at least one collocation point"));
    }
    let (lo, hi) = domain.corners();
    let mut pts = Array2::zeros((n, lo.len()));
    for mut row in pts.rows_mut() {
        // Reflect [0, T) onto (0, T].
        row[0] = domain.t_max - rng.random_range(0.0..domain.t_max);
        for a in 1..lo.len() {
            row[a] = rng.random_range(lo[a]..=hi[a]);
        }
    }
    Ok(pts)
}

/// Indices whose value exceeds mean + 3 · (population) standard deviation.
pub fn select_targeted(residuals: &[f64]) -> Vec<usize> {
    if residuals.is_empty() {
        return Vec::new();
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let std = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let cut = mean + 3.0 * std;
    (0..residuals.len())
        .filter(|&i| residuals[i] > cut)
        .collect()
}

/// Collocation points of one dataset.
#[derive(Clone, Debug)]
pub struct CollocationState {
    pub random: Matrix,
    pub targeted: Matrix,
    /// `|R|` at `random` then `targeted`, from the last evaluation.
    pub residuals: Vec<f64>,
}

impl CollocationState {
    pub fn new(random: Matrix) -> Self {
        let d = random.ncols();
        Self {
            random,
            targeted: Array2::zeros((0, d)),
            residuals: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.random.nrows() + self.targeted.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Matrix {
        ndarray::concatenate(
            ndarray::Axis(0),
            &[self.random.view(), self.targeted.view()],
        )
        .expect("same width")
    }

    /// Replace the targeted set by the recorded points whose residual is an
    /// outlier; points that no longer qualify are dropped.
    pub fn update_targeted(&mut self) {
        let all = self.points();
        let keep = select_targeted(&self.residuals);
        self.targeted = all.select(ndarray::Axis(0), &keep);
    }

    pub fn clear_targeted(&mut self) {
        self.targeted = Array2::zeros((0, self.random.ncols()));
    }
}

/// `Σ (u − target)² · inv_n`.
pub fn data_loss_node(g: &mut Graph, u: NodeId, target: NodeId, inv_n: NodeId) -> NodeId {
    let diff = g.sub(u, target);
    let sq = g.mul(diff, diff);
    let s = g.sum(sq);
    g.mul(s, inv_n)
}

/// `f₀ − Σ_k ξ_k f_k` over active terms, broadcast to the shape of `u`.
pub fn residual_node(g: &mut Graph, terms: &TermNodes, xi: &[Option<NodeId>], u: NodeId) -> NodeId {
    let mut r = terms.lhs;
    for (&f, x) in terms.rhs.iter().zip(xi) {
        if let Some(x) = *x {
            let term = g.mul(x, f);
            r = g.sub(r, term);
        }
    }
    // Derivative nodes can be narrower than the batch when they do not vary
    // from point to point; make the residual one entry per point.
    let ones = g.ones_like(u);
    g.mul(r, ones)
}

/// `Σ r² · inv_n`.
pub fn mean_square_node(g: &mut Graph, r: NodeId, inv_n: NodeId) -> NodeId {
    let sq = g.mul(r, r);
    let s = g.sum(sq);
    g.mul(s, inv_n)
}

/// `Σ a_k ξ_k²` with the weights `a_k` entering as non-trainable leaves.
pub fn lp_loss_node(
    g: &mut Graph,
    xi: &[Option<NodeId>],
    weights: &[Option<NodeId>],
) -> Option<NodeId> {
    let parts: Vec<NodeId> = xi
        .iter()
        .zip(weights)
        .filter_map(|(x, a)| {
            let (x, a) = (*x.as_ref()?, *a.as_ref()?);
            let sq = g.powi(x, 2);
            Some(g.mul(a, sq))
        })
        .collect();
    g.add_all(&parts)
}

/// `w_data Σ data + w_coll Σ coll + w_lp lp`.
pub fn total_loss_node(
    g: &mut Graph,
    data: &[NodeId],
    coll: &[NodeId],
    lp: Option<NodeId>,
    w: LossWeights,
) -> NodeId {
    let mut parts = Vec::new();
    for (nodes, weight) in [(data, w.data), (coll, w.coll)] {
        if let Some(s) = g.add_all(nodes) {
            let c = g.scalar(weight);
            parts.push(g.mul(c, s));
        }
    }
    if let Some(lp) = lp {
        let c = g.scalar(w.lp);
        parts.push(g.mul(c, lp));
    }
    match g.add_all(&parts) {
        Some(t) => t,
        None => g.scalar(0.0),
    }
}

/// Graph pieces of one dataset inside a [`LossModel`].
#[derive(Clone, Debug)]
pub struct DatasetNodes {
    pub input: NodeId,
    pub target: NodeId,
    pub inv_n: NodeId,
    pub net: BoundNetwork,
    pub terms: TermNodes,
    pub residual: NodeId,
    pub data_loss: NodeId,
    pub coll_loss: NodeId,
}

/// Value and gradient (aligned with [`LossModel::params`]) of a loss.
#[derive(Clone, Debug)]
pub struct Evaluated {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// One graph holding every surrogate, its library terms and residual, and
/// the active coefficients shared between datasets.
#[derive(Clone, Debug)]
pub struct LossModel {
    pub graph: Graph,
    pub datasets: Vec<DatasetNodes>,
    /// ξ leaf per library term, `None` for pruned terms.
    pub xi: Vec<Option<NodeId>>,
    pub lp_weights: Vec<Option<NodeId>>,
    pub lp: Option<NodeId>,
    /// Every network's parameters in dataset order, then the active ξ.
    pub params: ParamSet,
    pub chunk_size: usize,
}

impl LossModel {
    pub fn build(
        networks: &[Network],
        lib: &Library,
        plan: &EvalPlan,
        xi: &CoefficientVector,
        chunk_size: usize,
    ) -> Result<Self> {
        if xi.len() != lib.len() {
            return Err(Error::config(format!(
                "{} coefficients for {} library terms",
                xi.len(),
                lib.len()
            )));
        }
        if chunk_size == 0 {
            return Err(Error::config("chunk size must be positive"));
        }
        let mut g = Graph::new();
        let xi_nodes: Vec<Option<NodeId>> = (0..xi.len())
            .map(|k| xi.active[k].then(|| g.scalar_leaf(format!("xi[{k}]"), xi.values[k])))
            .collect();
        let weight_nodes: Vec<Option<NodeId>> = (0..xi.len())
            .map(|k| xi.active[k].then(|| g.scalar_leaf(format!("a[{k}]"), xi.weights[k])))
            .collect();
        let lp = lp_loss_node(&mut g, &xi_nodes, &weight_nodes);
        let mut params = ParamSet::new();
        let mut datasets = Vec::with_capacity(networks.len());
        for (i, net) in networks.iter().enumerate() {
            if net.architecture.input_dim != 1 + lib.spatial_dims {
                return Err(Error::config(format!(
                    "network {i} takes {} inputs but the library has {} spatial dimension(s)",
                    net.architecture.input_dim, lib.spatial_dims
                )));
            }
            let input = g.placeholder(format!("X[{i}]"));
            let target = g.placeholder(format!("target[{i}]"));
            let inv_n = g.placeholder(format!("inv_n[{i}]"));
            let bound = net.bind(&mut g, input)?;
            params.extend(&g, bound.params.iter().copied())?;
            let terms = evaluate_terms(&mut g, input, bound.output, plan, lib)?;
            let residual = residual_node(&mut g, &terms, &xi_nodes, bound.output);
            g.set_name(residual, format!("residual[{i}]"));
            let coll_loss = mean_square_node(&mut g, residual, inv_n);
            let data_loss = data_loss_node(&mut g, bound.output, target, inv_n);
            datasets.push(DatasetNodes {
                input,
                target,
                inv_n,
                net: bound,
                terms,
                residual,
                data_loss,
                coll_loss,
            });
        }
        params.extend(&g, xi_nodes.iter().flatten().copied())?;
        Ok(Self {
            graph: g,
            datasets,
            xi: xi_nodes,
            lp_weights: weight_nodes,
            lp,
            params,
            chunk_size,
        })
    }

    /// Push ξ values and IRLS weights into the graph.
    pub fn set_coefficients(&mut self, xi: &CoefficientVector) -> Result<()> {
        for k in 0..xi.len() {
            if let (Some(x), Some(a)) = (self.xi[k], self.lp_weights[k]) {
                self.graph.set_scalar(x, xi.values[k])?;
                self.graph.set_scalar(a, xi.weights[k])?;
            }
        }
        Ok(())
    }

    /// Active ξ values read from the graph into `xi`.
    pub fn read_coefficients(&self, xi: &mut CoefficientVector) {
        for (k, node) in self.xi.iter().enumerate() {
            if let Some(n) = node {
                xi.values[k] = self.graph.stored_value(*n).expect("xi leaf")[[0, 0]];
            }
        }
    }

    pub fn read_networks(&self, networks: &mut [Network]) {
        for (net, d) in networks.iter_mut().zip(&self.datasets) {
            net.read_back(&self.graph, &d.net);
        }
    }

    fn scalar_matrix(v: f64) -> Matrix {
        Array2::from_elem((1, 1), v)
    }

    fn accumulate(total: &mut [f64], g: &[f64]) {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }

    fn chunks(&self, n: usize) -> impl Iterator<Item = (usize, usize)> {
        let c = self.chunk_size;
        (0..n.div_ceil(c)).map(move |i| (i * c, ((i + 1) * c).min(n)))
    }

    fn check_chunk(&self, eval: &Evaluation, root: NodeId) -> Result<f64> {
        let v = eval.scalar(root).expect("scalar loss");
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at {}",
                self.graph.label(root)
            )));
        }
        Ok(v)
    }

    /// Mean squared misfit of dataset `i` on `(coords, values)`, with its
    /// gradient when requested.
    pub fn data_loss(
        &self,
        i: usize,
        coords: &Matrix,
        values: &[f64],
        with_gradient: bool,
    ) -> Result<Evaluated> {
        let n = values.len();
        if n == 0 || coords.nrows() != n {
            return Err(Error::config("data loss needs a non-empty dataset"));
        }
        let d = &self.datasets[i];
        let inv = Self::scalar_matrix(1.0 / n as f64);
        let mut value = 0.0;
        let mut gradient = if with_gradient {
            vec![0.0; self.params.size(&self.graph)]
        } else {
            Vec::new()
        };
        for (a, b) in self.chunks(n) {
            let x = coords.slice(s![a..b, ..]).to_owned();
            let t = Array2::from_shape_vec((b - a, 1), values[a..b].to_vec()).expect("column");
            let overrides = [(d.input, &x), (d.target, &t), (d.inv_n, &inv)];
            let eval = self.graph.forward(&[d.data_loss], &overrides)?;
            value += self.check_chunk(&eval, d.data_loss)?;
            if with_gradient {
                Self::accumulate(
                    &mut gradient,
                    &self.graph.gradient_from(&eval, d.data_loss, &self.params)?,
                );
            }
        }
        Ok(Evaluated { value, gradient })
    }

    /// Mean squared PDE residual of dataset `i` over `points`, the residual
    /// magnitude at every point, and the gradient when requested.
    pub fn collocation_loss(
        &self,
        i: usize,
        points: &Matrix,
        with_gradient: bool,
    ) -> Result<(Evaluated, Vec<f64>)> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::config("collocation loss needs at least one point"));
        }
        let d = &self.datasets[i];
        let inv = Self::scalar_matrix(1.0 / n as f64);
        let mut value = 0.0;
        let mut residuals = Vec::with_capacity(n);
        let mut gradient = if with_gradient {
            vec![0.0; self.params.size(&self.graph)]
        } else {
            Vec::new()
        };
        for (a, b) in self.chunks(n) {
            let x = points.slice(s![a..b, ..]).to_owned();
            let overrides = [(d.input, &x), (d.inv_n, &inv)];
            let eval = self.graph.forward(&[d.coll_loss], &overrides)?;
            value += self.check_chunk(&eval, d.coll_loss)?;
            residuals.extend(
                eval.get(d.residual)
                    .expect("residual evaluated")
                    .iter()
                    .map(|r| r.abs()),
            );
            if with_gradient {
                Self::accumulate(
                    &mut gradient,
                    &self.graph.gradient_from(&eval, d.coll_loss, &self.params)?,
                );
            }
        }
        Ok((Evaluated { value, gradient }, residuals))
    }

    /// The reweighted L^p loss and its gradient.
    pub fn lp_loss(&self) -> Result<Evaluated> {
        match self.lp {
            None => Ok(Evaluated {
                value: 0.0,
                gradient: vec![0.0; self.params.size(&self.graph)],
            }),
            Some(lp) => {
                let eval = self.graph.forward(&[lp], &[])?;
                Ok(Evaluated {
                    value: eval.scalar(lp).expect("scalar"),
                    gradient: self.graph.gradient_from(&eval, lp, &self.params)?,
                })
            }
        }
    }

    /// Values of dataset `i`'s library terms (`f₀` first) at `points`.
    pub fn term_values(&self, i: usize, points: &Matrix) -> Result<Vec<Vec<f64>>> {
        let d = &self.datasets[i];
        let mut roots = vec![d.terms.lhs];
        roots.extend(&d.terms.rhs);
        roots.push(d.net.output);
        let eval = self.graph.forward(&roots, &[(d.input, points)])?;
        let n = points.nrows();
        Ok(roots[..roots.len() - 1]
            .iter()
            .map(|&r| {
                let m = eval.get(r).expect("evaluated");
                (0..n).map(|j| m[[j.min(m.nrows() - 1), 0]]).collect()
            })
            .collect())
    }

    /// Signed PDE residual of dataset `i` at `points`, without gradients.
    pub fn residuals(&self, i: usize, points: &Matrix) -> Result<Vec<f64>> {
        let d = &self.datasets[i];
        let mut out = Vec::with_capacity(points.nrows());
        for (a, b) in self.chunks(points.nrows()) {
            let x = points.slice(s![a..b, ..]).to_owned();
            let eval = self.graph.forward(&[d.residual], &[(d.input, &x)])?;
            out.extend(
                eval.get(d.residual)
                    .expect("residual evaluated")
                    .iter()
                    .copied(),
            );
        }
        Ok(out)
    }

    /// Surrogate values of dataset `i` at `points`.
    pub fn predict(&self, i: usize, points: &Matrix) -> Result<Vec<f64>> {
        let d = &self.datasets[i];
        let eval = self.graph.forward(&[d.net.output], &[(d.input, points)])?;
        Ok(eval
            .get(d.net.output)
            .expect("evaluated")
            .iter()
            .copied()
            .collect())
    }
}

/// Writes the per-epoch loss history as CSV.
pub struct LossHistoryWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl LossHistoryWriter {
    pub fn create(path: &Path, datasets: usize) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut header = vec!["epoch".to_string(), "phase".into()];
        header.extend((0..datasets).map(|i| format!("data_loss_{i}")));
        header.extend((0..datasets).map(|i| format!("coll_loss_{i}")));
        header.extend((0..datasets).map(|i| format!("test_loss_{i}")));
        header.extend([
            "lp_loss".into(),
            "lp_metric".into(),
            "active_terms".into(),
            "w_lp".into(),
            "total".into(),
        ]);
        writeln!(out, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        Ok(Self { out })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn append(
        &mut self,
        epoch: usize,
        phase: &str,
        losses: &LossBreakdown,
        test: &[Option<f64>],
        lp_metric: f64,
        active: usize,
    ) -> std::io::Result<()> {
        let mut row = vec![epoch.to_string(), phase.to_string()];
        row.extend(losses.data.iter().map(f64::to_string));
        row.extend(losses.coll.iter().map(f64::to_string));
        row.extend(
            test.iter()
                .map(|t| t.map_or(String::new(), |v| v.to_string())),
        );
        row.extend([
            losses.lp.to_string(),
            lp_metric.to_string(),
            active.to_string(),
            losses.weights.lp.to_string(),
            losses.total().to_string(),
        ]);
        writeln!(self.out, "{}", row.join(","))
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational_net::Architecture;
    use crate::term_library::LibraryTerm;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn term(s: &str) -> LibraryTerm {
        LibraryTerm::parse(s).unwrap()
    }

    #[test]
    fn lp_weight_examples() {
        assert_eq!(lp_weight(1.0, 0.1, 1e-8), 1.0);
        assert_eq!(lp_weight(0.0, 0.1, 1e-8), 1e8);
        let a = lp_weight(0.5, 0.1, 1e-8);
        assert!((a - 3.7321).abs() < 1e-4);
        assert!((a * 0.25 - 0.5f64.powf(0.1)).abs() < 1e-15);
        assert!((0.5f64.powf(0.1) - 0.9330).abs() < 1e-4);
    }

    #[test]
    fn lp_loss_examples() {
        let mut xi = CoefficientVector::zeros(2, 0.1, 1e-8).unwrap();
        assert_eq!(xi.lp_loss(), 0.0);
        xi.values = vec![1.0, 0.5];
        xi.update_weights();
        assert!((xi.lp_loss() - 1.9330).abs() < 1e-4);
        assert!((xi.lp_loss() - xi.lp_metric()).abs() <= 1e-10 * xi.lp_metric());
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(CoefficientVector::zeros(3, 2.0, 1e-8).is_err());
        assert!(CoefficientVector::zeros(3, 0.1, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn lp_identity_at_epoch_start(values in proptest::collection::vec(-10.0f64..10.0, 1..20), p in 0.05f64..1.95) {
            let mut xi = CoefficientVector::zeros(values.len(), p, 1e-8).unwrap();
            xi.values = values;
            for v in &mut xi.values {
                if v.abs().powf(2.0 - p) < 1e-8 {
                    *v = 1.0;
                }
            }
            xi.update_weights();
            let m = xi.lp_metric();
            prop_assert!((xi.lp_loss() - m).abs() <= 1e-10 * m);
        }

        #[test]
        fn lp_gradient_is_exactly_two_a_xi(values in proptest::collection::vec(-3.0f64..3.0, 1..12)) {
            let mut xi = CoefficientVector::zeros(values.len(), 0.1, 1e-8).unwrap();
            xi.values = values;
            xi.update_weights();
            let mut g = Graph::new();
            let x: Vec<Option<NodeId>> = xi.values.iter().map(|&v| Some(g.scalar_leaf("xi", v))).collect();
            let a: Vec<Option<NodeId>> = xi.weights.iter().map(|&v| Some(g.scalar_leaf("a", v))).collect();
            let lp = lp_loss_node(&mut g, &x, &a).unwrap();
            let mut params = ParamSet::new();
            params.extend(&g, x.iter().flatten().copied()).unwrap();
            let grad = g.gradient(lp, &params).unwrap();
            for k in 0..xi.len() {
                prop_assert_eq!(grad[k].to_bits(), (2.0 * xi.weights[k] * xi.values[k]).to_bits());
            }
        }

        #[test]
        fn targeted_selection_matches_brute_force(r in proptest::collection::vec(0.0f64..100.0, 0..200)) {
            let got = select_targeted(&r);
            // Brute force with an independent two-pass formulation.
            let n = r.len() as f64;
            let want: Vec<usize> = if r.is_empty() {
                vec![]
            } else {
                let mean: f64 = r.iter().sum::<f64>() / n;
                let var: f64 = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                (0..r.len()).filter(|&i| r[i] > mean + 3.0 * var.sqrt()).collect()
            };
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn targeted_selection_examples() {
        assert!(select_targeted(&[2.0; 50]).is_empty());
        let mut r = vec![1.0; 100];
        r.push(50.0);
        assert_eq!(select_targeted(&r), vec![100]);
    }

    /// 1000 random residual vectors, including heavy-tailed ones, against a
    /// brute-force selection.
    #[test]
    fn targeted_selection_oracle_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let n = rng.random_range(1..300);
            let r: Vec<f64> = (0..n)
                .map(|_| {
                    let u: f64 = rng.random_range(0.0..1.0);
                    if rng.random_bool(0.02) {
                        u * 1e3
                    } else {
                        u
                    }
                })
                .collect();
            let mean = r.iter().sum::<f64>() / n as f64;
            let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let want: Vec<usize> = (0..n).filter(|&i| r[i] > mean + 3.0 * std).collect();
            assert_eq!(select_targeted(&r), want);
        }
    }

    #[test]
    fn targeted_update_keeps_only_outliers() {
        let mut c = CollocationState::new(Array2::from_shape_fn((101, 2), |(i, j)| (i + j) as f64));
        let mut r = vec![1.0; 101];
        r[7] = 50.0;
        c.residuals = r;
        c.update_targeted();
        assert_eq!(c.targeted, array![[7.0, 8.0]]);
        c.residuals = vec![1.0; 102];
        c.update_targeted();
        assert_eq!(c.targeted.nrows(), 0);
    }

    #[test]
    fn random_collocation_statistics() {
        let domain = ProblemDomain::new(1.0, vec![0.0], vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = sample_random_collocation(&domain, 10_000, &mut rng).unwrap();
        for c in 0..2 {
            let mean = pts.column(c).mean().unwrap();
            assert!((mean - 0.5).abs() < 0.02, "{mean}");
        }
        assert!(pts.column(0).iter().all(|&t| t > 0.0 && t <= 1.0));
        let one = sample_random_collocation(&domain, 1, &mut rng).unwrap();
        assert!(domain.contains(&one.row(0).to_vec()));
        let a = sample_random_collocation(&domain, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_random_collocation(&domain, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let flat = ProblemDomain {
            t_max: 1.0,
            lower: vec![0.0],
            upper: vec![0.0],
        };
        assert!(sample_random_collocation(&flat, 5, &mut rng).is_err());
    }

    #[test]
    fn data_and_collocation_examples() {
        let mut g = Graph::new();
        let u = g.leaf("u", array![[1.0], [2.0]]);
        let t = g.leaf("t", array![[0.0], [0.0]]);
        let inv = g.scalar_leaf("inv", 0.5);
        let l = data_loss_node(&mut g, u, t, inv);
        assert_eq!(g.evaluate_scalar(l).unwrap(), 2.5);
        g.set_value(t, array![[1.0], [2.0]]).unwrap();
        assert_eq!(g.evaluate_scalar(l).unwrap(), 0.0);

        let r = g.leaf("r", array![[1.0], [-1.0], [2.0]]);
        let third = g.scalar_leaf("inv3", 1.0 / 3.0);
        let c = mean_square_node(&mut g, r, third);
        assert!((g.evaluate_scalar(c).unwrap() - 2.0).abs() < 1e-15);
        let single = g.leaf("r1", array![[-0.3]]);
        let one = g.scalar(1.0);
        let c1 = mean_square_node(&mut g, single, one);
        assert!((g.evaluate_scalar(c1).unwrap() - 0.09).abs() < 1e-15);
    }

    #[test]
    fn residual_arithmetic() {
        let mut g = Graph::new();
        let lhs = g.leaf("f0", array![[1.0]]);
        let f1 = g.leaf("f1", array![[2.0]]);
        let f2 = g.leaf("f2", array![[3.0]]);
        let u = g.leaf("u", array![[0.0]]);
        let terms = TermNodes {
            derivatives: Default::default(),
            lhs,
            rhs: vec![f1, f2],
        };
        let x1 = g.scalar_leaf("xi1", 0.5);
        let x2 = g.scalar_leaf("xi2", 0.1);
        let r = residual_node(&mut g, &terms, &[Some(x1), Some(x2)], u);
        assert!((g.evaluate_scalar(r).unwrap() + 0.3).abs() < 1e-15);
        g.set_scalar(x1, 0.0).unwrap();
        g.set_scalar(x2, 0.0).unwrap();
        assert_eq!(g.evaluate_scalar(r).unwrap(), 1.0);
        let pruned = residual_node(&mut g, &terms, &[None, None], u);
        assert_eq!(g.evaluate_scalar(pruned).unwrap(), 1.0);
    }

    #[test]
    fn total_loss_composition() {
        let mut g = Graph::new();
        let d = g.scalar_leaf("d", 0.7);
        let c = g.scalar_leaf("c", 0.2);
        let lp = g.scalar_leaf("lp", 5.0);
        let burn_in = LossWeights {
            data: 1.0,
            coll: 1.0,
            lp: 0.0,
        };
        let t = total_loss_node(&mut g, &[d], &[c], Some(lp), burn_in);
        assert!((g.evaluate_scalar(t).unwrap() - 0.9).abs() < 1e-15);
        let doubled = LossWeights {
            coll: 2.0,
            ..burn_in
        };
        let t2 = total_loss_node(&mut g, &[d], &[c], Some(lp), doubled);
        assert!(
            (g.evaluate_scalar(t2).unwrap() - g.evaluate_scalar(t).unwrap() - 0.2).abs() < 1e-15
        );
        let zero = g.scalar(0.0);
        let t0 = total_loss_node(&mut g, &[zero], &[zero], Some(zero), doubled);
        assert_eq!(g.evaluate_scalar(t0).unwrap(), 0.0);
        let breakdown = LossBreakdown {
            data: vec![0.7],
            coll: vec![0.2],
            lp: 5.0,
            weights: burn_in,
        };
        assert!((breakdown.total() - 0.9).abs() < 1e-15);
    }

    fn small_model(xi: &CoefficientVector) -> (LossModel, Library) {
        let lib = Library::new(
            term("D_t U"),
            vec![term("D_x^2 U"), term("U D_x U"), term("U")],
            1,
        )
        .unwrap();
        let plan = EvalPlan::build(&lib);
        let net = Network::init(Architecture::new(2, 2, 6), 3).unwrap();
        (LossModel::build(&[net], &lib, &plan, xi, 7).unwrap(), lib)
    }

    fn points(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_network_data_loss_is_target_variance() {
        let xi = CoefficientVector::zeros(3, 0.1, 1e-8).unwrap();
        let (mut model, _) = small_model(&xi);
        // Zero the output layer so the surrogate is identically zero.
        let out_w = model.datasets[0].net.params[model.datasets[0].net.params.len() - 2];
        let shape = model.graph.stored_value(out_w).unwrap().dim();
        model.graph.set_value(out_w, Array2::zeros(shape)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = rand_distr::StandardNormal;
        let targets: Vec<f64> = (0..10_000).map(|_| rng.sample::<f64, _>(normal)).collect();
        let loss = model
            .data_loss(0, &points(10_000, 1), &targets, false)
            .unwrap()
            .value;
        let mean = targets.iter().sum::<f64>() / 1e4;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 1e4;
        assert!((loss - var).abs() <= 0.05 * var, "{loss} vs {var}");
    }

    /// Residuals recorded by the loss match a closed-form linear combination
    /// of cached term values, for ξ and for 2ξ.
    #[test]
    fn residuals_are_linear_in_xi() {
        let mut xi = CoefficientVector::zeros(3, 0.1, 1e-8).unwrap();
        xi.values = vec![0.3, -1.1, 0.25];
        let (mut model, _) = small_model(&xi);
        let pts = points(23, 5);
        let terms = model.term_values(0, &pts).unwrap();
        for scale in [1.0, 2.0] {
            let mut scaled = xi.clone();
            scaled.values.iter_mut().for_each(|v| *v *= scale);
            model.set_coefficients(&scaled).unwrap();
            let (_, r) = model.collocation_loss(0, &pts, false).unwrap();
            let signed = model.residuals(0, &pts).unwrap();
            for j in 0..pts.nrows() {
                let expect = terms[0][j]
                    - (0..3)
                        .map(|k| scaled.values[k] * terms[k + 1][j])
                        .sum::<f64>();
                assert!((r[j] - expect.abs()).abs() <= 1e-12 * (1.0 + expect.abs()));
                assert!((signed[j] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn residual_superposition(a in proptest::collection::vec(-2.0f64..2.0, 3), b in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let xi0 = CoefficientVector::zeros(3, 0.1, 1e-8).unwrap();
            let (mut model, _) = small_model(&xi0);
            let pts = points(9, 2);
            let mut residual = |v: &[f64]| {
                let mut x = xi0.clone();
                x.values = v.to_vec();
                model.set_coefficients(&x).unwrap();
                let d = &model.datasets[0];
                let e = model.graph.forward(&[d.residual], &[(d.input, &pts)]).unwrap();
                e.get(d.residual).unwrap().clone()
            };
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = residual(&a) + residual(&b) - residual(&[0.0; 3]);
            let rhs = residual(&sum);
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() <= 1e-10 * (1.0 + r.abs()));
            }
        }

        #[test]
        fn collocation_loss_is_permutation_invariant(seed in any::<u64>()) {
            let mut xi = CoefficientVector::zeros(3, 0.1, 1e-8).unwrap();
            xi.values = vec![0.1, -1.0, 0.5];
            let (model, _) = small_model(&xi);
            let pts = points(30, 8);
            let mut order: Vec<usize> = (0..30).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..30).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let shuffled = pts.select(ndarray::Axis(0), &order);
            let (a, _) = model.collocation_loss(0, &pts, false).unwrap();
            let (b, _) = model.collocation_loss(0, &shuffled, false).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-12 * a.value);
        }
    }

    #[test]
    fn chunked_gradient_matches_single_chunk() {
        let mut xi = CoefficientVector::zeros(3, 0.1, 1e-8).unwrap();
        xi.values = vec![0.1, -1.0, 0.5];
        let (mut model, _) = small_model(&xi);
        let pts = points(40, 3);
        let (small, _) = model.collocation_loss(0, &pts, true).unwrap();
        model.chunk_size = 1000;
        let (big, _) = model.collocation_loss(0, &pts, true).unwrap();
        assert!((small.value - big.value).abs() <= 1e-13);
        for (a, b) in small.gradient.iter().zip(&big.gradient) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn empty_inputs_are_configuration_errors() {
        let xi = CoefficientVector::zeros(3, 0.1, 1e-8).unwrap();
        let (model, _) = small_model(&xi);
        assert!(matches!(
            model.data_loss(0, &Array2::zeros((0, 2)), &[], false),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            model.collocation_loss(0, &Array2::zeros((0, 2)), false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prune_semantics() {
        let mut xi = CoefficientVector::zeros(3, 0.1, 1e-8).unwrap();
        xi.values = vec![0.1, 1e-6, -0.5];
        assert_eq!(xi.prune(5e-4), vec![1]);
        assert_eq!(xi.active, vec![true, false, true]);
        assert_eq!(xi.values, vec![0.1, 0.0, -0.5]);
        assert!(xi.prune(5e-4).is_empty());
        // Pruning is irreversible: a later large value cannot reactivate.
        xi.values[1] = 3.0;
        xi.prune(5e-4);
        assert!(!xi.active[1]);
        let eps32 = 2f64.powi(-23);
        assert!((eps32.sqrt() - 3.4527e-4).abs() < 1e-8);
        assert!(5e-4 > eps32.sqrt());
    }
}
