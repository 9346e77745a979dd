//! Adam, the burn-in / sparsification / fine-tune schedule with pruning in
//! between, and the identified-PDE report.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet};
use crate::data::PointDataset;
use crate::error::{Error, Result};
use crate::loss::{
    sample_random_collocation, CoefficientVector, CollocationState, LossBreakdown,
    LossHistoryWriter, LossModel, LossWeights,
};
use crate::rational_net::{Architecture, Network};
use crate::term_library::{EvalPlan, Library, LibraryTerm};

/// Adam with bias correction over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "parameter count changed under the optimizer"
        );
        assert_eq!(
            grads.len(),
            self.m.len(),
            "gradient does not align with parameters"
        );
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseKind {
    BurnIn,
    Sparsification,
    FineTune,
}

impl PhaseKind {
    pub const ORDER: [PhaseKind; 3] = [
        PhaseKind::BurnIn,
        PhaseKind::Sparsification,
        PhaseKind::FineTune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::BurnIn => "burn-in",
            PhaseKind::Sparsification => "sparsification",
            PhaseKind::FineTune => "fine-tune",
        }
    }
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fine-tune stopping rules besides the epoch cap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Stop once the test loss has not improved for this many epochs while
    /// the training loss kept falling below its value at the best test epoch.
    pub patience: usize,
    /// Stop once `Σ|ξ|^p` moved by less than `lp_tolerance` (relative) over
    /// this many epochs.
    pub lp_window: usize,
    pub lp_tolerance: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            patience: 100,
            lp_window: 100,
            lp_tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub kind: PhaseKind,
    pub epochs: usize,
    pub w_data: f64,
    pub w_coll: f64,
    pub w_lp: f64,
    pub lr: f64,
    pub early_stop: Option<EarlyStop>,
}

impl PhaseConfig {
    pub fn new(kind: PhaseKind, epochs: usize, w_lp: f64) -> Self {
        Self {
            kind,
            epochs,
            w_data: 1.0,
            w_coll: 1.0,
            w_lp,
            lr: 1e-3,
            early_stop: (kind == PhaseKind::FineTune).then(EarlyStop::default),
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            data: self.w_data,
            coll: self.w_coll,
            lp: self.w_lp,
        }
    }

    /// Problems with this phase, prefixed by its name.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let name = self.kind.name();
        for (key, w) in [
            ("w_data", self.w_data),
            ("w_coll", self.w_coll),
            ("w_lp", self.w_lp),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                out.push(format!(
                    "{name}: {key} must be finite and non-negative, got {w}"
                ));
            }
        }
        match self.kind {
            PhaseKind::BurnIn | PhaseKind::FineTune if self.w_lp != 0.0 => {
                out.push(format!("{name}: w_lp must be 0, got {}", self.w_lp));
            }
            PhaseKind::Sparsification if !(self.w_lp > 0.0) => {
                out.push(format!("{name}: w_lp must be positive, got {}", self.w_lp));
            }
            _ => {}
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            out.push(format!(
                "{name}: learning rate must be positive, got {}",
                self.lr
            ));
        }
        if let Some(es) = &self.early_stop {
            if es.lp_window == 0 || es.patience == 0 {
                out.push(format!("{name}: early-stop windows must be positive"));
            }
            if !(es.lp_tolerance >= 0.0) {
                out.push(format!("{name}: lp tolerance must be non-negative"));
            }
        }
        out
    }
}

/// One system response function: training data, optional held-out data and
/// its surrogate.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub train: PointDataset,
    pub test: Option<PointDataset>,
    pub architecture: Architecture,
    pub network_seed: u64,
    pub collocation_seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub library: Library,
    pub datasets: Vec<DatasetSpec>,
    pub phases: Vec<PhaseConfig>,
    pub p: f64,
    pub delta: f64,
    pub n_random_coll: usize,
    pub prune_threshold: f64,
    /// Points per forward/backward pass; bounds memory, not the result.
    pub chunk_size: usize,
    /// Map each dataset's box onto [-1, 1] before the first layer.
    pub normalize_inputs: bool,
    /// Carried into the report (config hash, version, ...).
    pub metadata: BTreeMap<String, String>,
}

impl TrainConfig {
    pub fn new(library: Library, datasets: Vec<DatasetSpec>, phases: Vec<PhaseConfig>) -> Self {
        Self {
            library,
            datasets,
            phases,
            p: 0.1,
            delta: 1e-8,
            n_random_coll: 3000,
            prune_threshold: 5e-4,
            chunk_size: 64,
            normalize_inputs: true,
            metadata: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.datasets.is_empty() {
            problems.push("at least one dataset is required".to_string());
        }
        let kinds: Vec<PhaseKind> = self.phases.iter().map(|p| p.kind).collect();
        if kinds != PhaseKind::ORDER {
            problems.push(format!(
                "phases must be burn-in, sparsification, fine-tune in that order, got {kinds:?}"
            ));
        }
        for phase in &self.phases {
            problems.extend(phase.problems());
        }
        if !(self.p > 0.0 && self.p < 2.0) {
            problems.push(format!("p must lie in (0, 2), got {}", self.p));
        }
        if !(self.delta > 0.0) {
            problems.push(format!("delta must be positive, got {}", self.delta));
        }
        if self.n_random_coll == 0 {
            problems.push("n_random_coll must be at least 1".into());
        }
        if !(self.prune_threshold > 0.0) {
            problems.push(format!(
                "prune threshold must be positive, got {}",
                self.prune_threshold
            ));
        }
        if self.chunk_size == 0 {
            problems.push("chunk size must be positive".into());
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if d.train.is_empty() {
                problems.push(format!("dataset {i}: no training points"));
            }
            if d.train.domain.spatial_dims() != self.library.spatial_dims {
                problems.push(format!(
                    "dataset {i}: {} spatial dimension(s) but the library uses {}",
                    d.train.domain.spatial_dims(),
                    self.library.spatial_dims
                ));
            }
            if d.architecture.input_dim != 1 + self.library.spatial_dims {
                problems.push(format!(
                    "dataset {i}: network input dimension {} does not match the data",
                    d.architecture.input_dim
                ));
            }
            if let Err(e) = d.architecture.validate() {
                problems.push(format!("dataset {i}: {e}"));
            }
            if let Some(t) = &d.test {
                if t.coords.ncols() != d.train.coords.ncols() {
                    problems.push(format!(
                        "dataset {i}: test and training coordinates differ in width"
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Everything recorded about one epoch.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: PhaseKind,
    pub losses: LossBreakdown,
    /// Per-dataset test data loss, where a test set exists.
    pub test: Vec<Option<f64>>,
    pub lp_metric: f64,
    /// ξ after this epoch's step; zero for pruned terms.
    pub xi: Vec<f64>,
    pub active: Vec<bool>,
}

impl EpochRecord {
    pub fn test_total(&self) -> Option<f64> {
        let vals: Vec<f64> = self.test.iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EpochCap,
    LpConverged,
    EarlyStopped,
}

#[derive(Clone, Debug)]
pub struct PhaseSummary {
    pub kind: PhaseKind,
    pub epochs_run: usize,
    pub stop: StopReason,
    /// Library indices pruned right after this phase.
    pub pruned: Vec<usize>,
}

/// Networks and ξ at the end of a phase, before pruning.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub phase: PhaseKind,
    pub networks: Vec<Network>,
    pub xi: CoefficientVector,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub networks: Vec<Network>,
    pub xi: CoefficientVector,
    pub collocation: Vec<CollocationState>,
    rngs: Vec<ChaCha8Rng>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub phases: Vec<PhaseSummary>,
    pub checkpoints: Vec<Checkpoint>,
}

struct DatasetArrays {
    train_values: Vec<f64>,
    test: Option<(ndarray::Array2<f64>, Vec<f64>)>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut networks = Vec::new();
        let mut collocation = Vec::new();
        let mut rngs = Vec::new();
        for d in &cfg.datasets {
            let mut net = Network::init(d.architecture.clone(), d.network_seed)?;
            if cfg.normalize_inputs {
                let (lo, hi) = d.train.domain.corners();
                net = net.with_input_bounds(lo, hi)?;
            }
            networks.push(net);
            let dims = d.train.coords.ncols();
            collocation.push(CollocationState::new(ndarray::Array2::zeros((0, dims))));
            rngs.push(ChaCha8Rng::seed_from_u64(d.collocation_seed));
        }
        Ok(Self {
            networks,
            xi: CoefficientVector::zeros(cfg.library.len(), cfg.p, cfg.delta)?,
            collocation,
            rngs,
            epoch: 0,
            history: Vec::new(),
            phases: Vec::new(),
            checkpoints: Vec::new(),
        })
    }
}

fn arrays(cfg: &TrainConfig) -> Vec<DatasetArrays> {
    cfg.datasets
        .iter()
        .map(|d| DatasetArrays {
            train_values: d.train.values.clone(),
            test: d
                .test
                .as_ref()
                .filter(|t| !t.is_empty())
                .map(|t| (t.coords.clone(), t.values.clone())),
        })
        .collect()
}

fn parameter_label(graph: &Graph, params: &ParamSet, mut flat: usize) -> String {
    for &leaf in params.leaves() {
        let n = graph.stored_value(leaf).map_or(0, |v| v.len());
        if flat < n {
            return format!("{} (entry {flat})", graph.label(leaf));
        }
        flat -= n;
    }
    "unknown parameter".into()
}

/// Losses and summed gradient of one epoch at the current parameters.
struct EpochEval {
    losses: LossBreakdown,
    test: Vec<Option<f64>>,
    gradient: Vec<f64>,
    residuals: Vec<Vec<f64>>,
}

fn evaluate_epoch(
    model: &LossModel,
    state: &TrainState,
    data: &[DatasetArrays],
    cfg: &TrainConfig,
    phase: &PhaseConfig,
) -> Result<EpochEval> {
    let n_params = model.params.size(&model.graph);
    let mut data_grad = vec![0.0; n_params];
    let mut coll_grad = vec![0.0; n_params];
    let mut losses = LossBreakdown {
        data: Vec::new(),
        coll: Vec::new(),
        lp: state.xi.lp_loss(),
        weights: phase.weights(),
    };
    let mut test = Vec::new();
    let mut residuals = Vec::new();
    for (i, d) in data.iter().enumerate() {
        let e = model.data_loss(i, &cfg.datasets[i].train.coords, &d.train_values, true)?;
        losses.data.push(e.value);
        add_into(&mut data_grad, &e.gradient);
        let (c, r) = model.collocation_loss(i, &state.collocation[i].points(), true)?;
        losses.coll.push(c.value);
        add_into(&mut coll_grad, &c.gradient);
        residuals.push(r);
        test.push(match &d.test {
            Some((x, v)) => Some(model.data_loss(i, x, v, false)?.value),
            None => None,
        });
    }
    let w = phase.weights();
    let mut gradient: Vec<f64> = data_grad
        .iter()
        .zip(&coll_grad)
        .map(|(d, c)| w.data * d + w.coll * c)
        .collect();
    if w.lp > 0.0 {
        let lp = model.lp_loss()?;
        losses.lp = lp.value;
        for (g, l) in gradient.iter_mut().zip(&lp.gradient) {
            *g += w.lp * l;
        }
    }
    if let Some(bad) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient for {} at epoch {}",
            parameter_label(&model.graph, &model.params, bad),
            state.epoch + 1
        )));
    }
    Ok(EpochEval {
        losses,
        test,
        gradient,
        residuals,
    })
}

fn add_into(total: &mut [f64], g: &[f64]) {
    for (t, v) in total.iter_mut().zip(g) {
        *t += v;
    }
}

/// Loss graph for the current networks and active coefficients.
pub fn build_model(state: &TrainState, cfg: &TrainConfig) -> Result<LossModel> {
    let plan = EvalPlan::build(&cfg.library);
    LossModel::build(
        &state.networks,
        &cfg.library,
        &plan,
        &state.xi,
        cfg.chunk_size,
    )
}

fn resample(state: &mut TrainState, cfg: &TrainConfig) -> Result<()> {
    for (i, d) in cfg.datasets.iter().enumerate() {
        state.collocation[i].random =
            sample_random_collocation(&d.train.domain, cfg.n_random_coll, &mut state.rngs[i])?;
    }
    Ok(())
}

/// Gradient of the first-epoch loss of the first phase with respect to each
/// library coefficient (zero for inactive terms), from a fresh state.
pub fn initial_xi_gradient(cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut state = TrainState::new(cfg)?;
    resample(&mut state, cfg)?;
    state.xi.update_weights();
    let model = build_model(&state, cfg)?;
    let eval = evaluate_epoch(&model, &state, &arrays(cfg), cfg, &cfg.phases[0])?;
    let mut out = vec![0.0; cfg.library.len()];
    let mut offset = model.params.size(&model.graph) - state.xi.active_count();
    for (k, node) in model.xi.iter().enumerate() {
        if node.is_some() {
            out[k] = eval.gradient[offset];
            offset += 1;
        }
    }
    Ok(out)
}

/// Run one phase: every epoch resamples collocation points, refreshes the
/// IRLS weights, takes one full-batch Adam step on every network and the
/// active coefficients, then updates the targeted points.
pub fn run_phase(
    state: &mut TrainState,
    cfg: &TrainConfig,
    phase: &PhaseConfig,
) -> Result<PhaseSummary> {
    let data = arrays(cfg);
    let mut model = build_model(state, cfg)?;
    let mut adam = Adam::new(model.params.size(&model.graph));
    let start = state.history.len();
    let mut best_test: Option<(usize, f64, f64)> = None;
    let mut stop = StopReason::EpochCap;
    let mut run = 0;
    log::info!(
        "{}: up to {} epochs, {} active terms",
        phase.kind,
        phase.epochs,
        state.xi.active_count()
    );
    for e in 0..phase.epochs {
        resample(state, cfg)?;
        state.xi.update_weights();
        model.set_coefficients(&state.xi)?;
        let eval = evaluate_epoch(&model, state, &data, cfg, phase)?;
        if !eval.losses.total().is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at epoch {}",
                state.epoch + 1
            )));
        }
        let mut values = model.params.values(&model.graph);
        adam.step(&mut values, &eval.gradient, phase.lr);
        model.params.assign(&mut model.graph, &values)?;
        model.read_coefficients(&mut state.xi);
        for (c, r) in state.collocation.iter_mut().zip(eval.residuals) {
            c.residuals = r;
            c.update_targeted();
        }
        state.epoch += 1;
        run += 1;
        let record = EpochRecord {
            epoch: state.epoch,
            phase: phase.kind,
            lp_metric: state.xi.lp_metric(),
            xi: state.xi.values.clone(),
            active: state.xi.active.clone(),
            losses: eval.losses,
            test: eval.test,
        };
        if e % 100 == 0 || e + 1 == phase.epochs {
            log::debug!(
                "{} epoch {}: total {:.6e}, lp {:.4}",
                phase.kind,
                state.epoch,
                record.losses.total(),
                record.lp_metric
            );
        }
        let train_total = record.losses.total();
        let test_total = record.test_total();
        state.history.push(record);

        if let Some(es) = phase.early_stop {
            if let Some(t) = test_total {
                if best_test.is_none_or(|(_, b, _)| t < b) {
                    best_test = Some((e, t, train_total));
                }
                let (best_e, _, train_at_best) = best_test.expect("set above");
                if e - best_e >= es.patience && train_total < train_at_best {
                    stop = StopReason::EarlyStopped;
                    break;
                }
            }
            let phase_hist = &state.history[start..];
            if phase_hist.len() > es.lp_window {
                let now = phase_hist[phase_hist.len() - 1].lp_metric;
                let then = phase_hist[phase_hist.len() - 1 - es.lp_window].lp_metric;
                if (now - then).abs() <= es.lp_tolerance * then.abs() {
                    stop = StopReason::LpConverged;
                    break;
                }
            }
        }
    }
    model.read_networks(&mut state.networks);
    for c in &mut state.collocation {
        c.clear_targeted();
    }
    state.checkpoints.push(Checkpoint {
        phase: phase.kind,
        networks: state.networks.clone(),
        xi: state.xi.clone(),
    });
    log::info!("{} finished after {run} epochs ({stop:?})", phase.kind);
    Ok(PhaseSummary {
        kind: phase.kind,
        epochs_run: run,
        stop,
        pruned: Vec::new(),
    })
}

/// Prune after a phase; an empty right-hand side is an error.
pub fn prune_after(
    state: &mut TrainState,
    cfg: &TrainConfig,
    summary: &mut PhaseSummary,
) -> Result<()> {
    summary.pruned = state.xi.prune(cfg.prune_threshold);
    log::info!(
        "pruned {} term(s) after {}; {} remain",
        summary.pruned.len(),
        summary.kind,
        state.xi.active_count()
    );
    if state.xi.active_count() == 0 {
        return Err(Error::EmptyPde(format!(
            "all {} terms fell below {} after {}",
            cfg.library.len(),
            cfg.prune_threshold,
            summary.kind
        )));
    }
    Ok(())
}

/// The full schedule. The state is returned alongside the result so that
/// histories survive a failed run.
pub fn train_with_state(cfg: &TrainConfig) -> (Option<TrainState>, Result<IdentifiedPde>) {
    let mut state = match TrainState::new(cfg) {
        Ok(s) => s,
        Err(e) => return (None, Err(e)),
    };
    let result = run_schedule(&mut state, cfg);
    (Some(state), result)
}

pub fn train(cfg: &TrainConfig) -> Result<IdentifiedPde> {
    train_with_state(cfg).1
}

fn run_schedule(state: &mut TrainState, cfg: &TrainConfig) -> Result<IdentifiedPde> {
    for phase in &cfg.phases {
        let mut summary = run_phase(state, cfg, phase)?;
        let result = if phase.kind == PhaseKind::FineTune {
            Ok(())
        } else {
            prune_after(state, cfg, &mut summary)
        };
        state.phases.push(summary);
        result?;
    }
    Ok(IdentifiedPde::from_state(state, cfg))
}

/// Recovered equation: the left-hand term and the surviving right-hand terms
/// with their coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentifiedPde {
    pub lhs: LibraryTerm,
    pub terms: Vec<(LibraryTerm, f64)>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct PdeFile {
    equation: String,
    lhs: String,
    terms: Vec<(String, f64)>,
    metadata: BTreeMap<String, String>,
}

impl IdentifiedPde {
    pub fn from_state(state: &TrainState, cfg: &TrainConfig) -> Self {
        let terms = state
            .xi
            .active_indices()
            .into_iter()
            .map(|k| (cfg.library.rhs[k].clone(), state.xi.values[k]))
            .collect();
        let mut metadata = cfg.metadata.clone();
        for (i, d) in cfg.datasets.iter().enumerate() {
            metadata.insert(
                format!("dataset{i}.network_seed"),
                d.network_seed.to_string(),
            );
            metadata.insert(
                format!("dataset{i}.collocation_seed"),
                d.collocation_seed.to_string(),
            );
        }
        for s in &state.phases {
            metadata.insert(format!("epochs.{}", s.kind), s.epochs_run.to_string());
            metadata.insert(format!("stop.{}", s.kind), format!("{:?}", s.stop));
        }
        Self {
            lhs: cfg.library.lhs.clone(),
            terms,
            metadata,
        }
    }

    /// Support as rendered terms, in library order.
    pub fn support(&self) -> Vec<String> {
        self.terms.iter().map(|(t, _)| t.to_string()).collect()
    }

    pub fn coefficient(&self, term: &LibraryTerm) -> Option<f64> {
        self.terms.iter().find(|(t, _)| t == term).map(|(_, c)| *c)
    }

    /// `"<lhs> = c₁(term₁) ± |c₂|(term₂) ..."` with four decimals.
    pub fn report(&self) -> String {
        let mut out = format!("{} =", self.lhs);
        for (i, (term, c)) in self.terms.iter().enumerate() {
            let sign = if c.is_sign_negative() { "-" } else { "+" };
            let body = format!("{:.4}{}", c.abs(), term.render_factors());
            match (i, sign) {
                (0, "+") => out.push_str(&format!(" {body}")),
                (0, _) => out.push_str(&format!(" -{body}")),
                _ => out.push_str(&format!(" {sign} {body}")),
            }
        }
        out
    }

    /// Inverse of [`IdentifiedPde::report`] (metadata is not part of the text).
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let (lhs, rhs) = text
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("column 1 of {text:?}"), "missing '='"))?;
        let lhs = LibraryTerm::parse(lhs.trim())?;
        let base = lhs_len(text, rhs);
        let bytes = rhs.as_bytes();
        let mut terms = Vec::new();
        let mut i = 0;
        let at = |i: usize| format!("column {} of {text:?}", base + i + 1);
        let skip_ws = |i: &mut usize| {
            while *i < bytes.len() && bytes[*i] == b' ' {
                *i += 1;
            }
        };
        skip_ws(&mut i);
        while i < bytes.len() {
            let mut negative = false;
            if bytes[i] == b'+' || bytes[i] == b'-' {
                negative = bytes[i] == b'-';
                i += 1;
                skip_ws(&mut i);
            } else if !terms.is_empty() {
                return Err(Error::parse(at(i), "expected '+' or '-' between terms"));
            }
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            let magnitude: f64 = rhs[start..i]
                .parse()
                .map_err(|_| Error::parse(at(start), "expected a coefficient"))?;
            if i >= bytes.len() || bytes[i] != b'(' {
                return Err(Error::parse(at(i), "expected '(' after the coefficient"));
            }
            let term_start = i;
            let mut depth = 0i32;
            while i < bytes.len() {
                match bytes[i] {
                    b'(' => depth += 1,
                    b')' => depth -= 1,
                    b' ' if depth == 0 => break,
                    _ => {}
                }
                i += 1;
            }
            if depth != 0 {
                return Err(Error::parse(at(i), "unbalanced parentheses"));
            }
            let term = LibraryTerm::parse(&rhs[term_start..i])?;
            terms.push((term, if negative { -magnitude } else { magnitude }));
            skip_ws(&mut i);
        }
        if terms.is_empty() {
            return Err(Error::parse(at(0), "no right-hand-side terms"));
        }
        Ok(Self {
            lhs,
            terms,
            metadata: BTreeMap::new(),
        })
    }

    pub fn to_json(&self) -> String {
        let file = PdeFile {
            equation: self.report(),
            lhs: self.lhs.to_string(),
            terms: self
                .terms
                .iter()
                .map(|(t, c)| (t.to_string(), *c))
                .collect(),
            metadata: self.metadata.clone(),
        };
        serde_json::to_string_pretty(&file).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PdeFile = serde_json::from_str(text)
            .map_err(|e| Error::parse(format!("line {}", e.line()), e.to_string()))?;
        let terms = file
            .terms
            .iter()
            .map(|(t, c)| Ok((LibraryTerm::parse(t)?, *c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lhs: LibraryTerm::parse(&file.lhs)?,
            terms,
            metadata: file.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn lhs_len(text: &str, rhs: &str) -> usize {
    text.len() - rhs.len()
}

impl fmt::Display for IdentifiedPde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.report())
    }
}

/// Loss history (one row per epoch) as CSV.
pub fn write_loss_history(path: &Path, history: &[EpochRecord], datasets: usize) -> Result<()> {
    let mut w = LossHistoryWriter::create(path, datasets)?;
    for r in history {
        w.append(
            r.epoch,
            r.phase.name(),
            &r.losses,
            &r.test,
            r.lp_metric,
            r.active.iter().filter(|&&a| a).count(),
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Coefficient history: every ξ_k and its active flag per epoch.
pub fn write_xi_history(path: &Path, history: &[EpochRecord], library: &Library) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let mut header = vec!["epoch".to_string(), "phase".into()];
    header.extend(library.rhs.iter().map(|t| format!("\"{t}\"")));
    header.extend((0..library.len()).map(|k| format!("active_{k}")));
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for r in history {
        let mut row = vec![r.epoch.to_string(), r.phase.name().to_string()];
        row.extend(r.xi.iter().map(f64::to_string));
        row.extend(r.active.iter().map(|&a| u8::from(a).to_string()));
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}
