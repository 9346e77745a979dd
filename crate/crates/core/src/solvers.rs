//! Noise-free reference data: periodic Fourier pseudo-spectral solvers with
//! fourth-order exponential time differencing (ETDRK4, contour-integral
//! coefficients), plus the closed-form 2D wave field.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};

use crate::data::{GridDataset, PointDataset, ProblemDomain};
use crate::error::{Error, Result};

/// Points on the contour used to evaluate the ETDRK4 φ-functions.
const CONTOUR_POINTS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Equation {
    /// `u_t = ν u_xx − u u_x`
    Burgers { nu: f64 },
    /// `u_t = −u u_x − u_xxx`
    KdV,
    /// `u_t = ν u_xx − μ u_xxxx − λ u u_x`
    KuramotoSivashinsky { nu: f64, mu: f64, lambda: f64 },
    /// `u_t = ε u_xx − u³ + u`
    AllenCahn { epsilon: f64 },
}

impl fmt::Display for Equation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Equation::Burgers { nu } => write!(f, "burgers nu={nu}"),
            Equation::KdV => write!(f, "kdv"),
            Equation::KuramotoSivashinsky { nu, mu, lambda } => {
                write!(f, "ks nu={nu} mu={mu} lambda={lambda}")
            }
            Equation::AllenCahn { epsilon } => write!(f, "allen-cahn epsilon={epsilon}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitialCondition {
    /// `−sin(πx/8)`
    BurgersSine,
    /// `−sin(πx/20)`
    KdvSine,
    /// `exp(−π(x/30)²) cos(πx/10)`
    KdvExpCos,
    /// `cos(2πx/5)(1 + sin(πx/5))`
    KsCosSine,
    /// `−0.2 sin(2πx)⁵ + 0.8 sin(5πx)`
    AllenCahn,
}

impl InitialCondition {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Self::BurgersSine => -(PI * x / 8.0).sin(),
            Self::KdvSine => -(PI * x / 20.0).sin(),
            Self::KdvExpCos => (-PI * (x / 30.0).powi(2)).exp() * (PI * x / 10.0).cos(),
            Self::KsCosSine => (2.0 * PI * x / 5.0).cos() * (1.0 + (PI * x / 5.0).sin()),
            Self::AllenCahn => -0.2 * (2.0 * PI * x).sin().powi(5) + 0.8 * (5.0 * PI * x).sin(),
        }
    }
}

/// How the output spatial axis relates to the periodic computational grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputAxis {
    /// `intervals + 1` equispaced points from `lower` to `upper`; the last
    /// repeats the first by periodicity. `intervals` must divide the mode
    /// count.
    Periodic { intervals: usize },
    /// `points` equispaced points from `lower` to `upper` inclusive, obtained
    /// by evaluating the Fourier series.
    Interpolated { points: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub name: String,
    pub equation: Equation,
    pub initial: InitialCondition,
    pub lower: f64,
    pub upper: f64,
    pub t_max: f64,
    /// Fourier modes (grid points) of the computation.
    pub modes: usize,
    pub time_samples: usize,
    pub output: OutputAxis,
    /// Internal time steps between output samples.
    pub steps_per_sample: usize,
}

impl SolverConfig {
    pub fn burgers() -> Self {
        Self {
            name: "burgers".into(),
            equation: Equation::Burgers { nu: 0.1 },
            initial: InitialCondition::BurgersSine,
            lower: -8.0,
            upper: 8.0,
            t_max: 10.0,
            modes: 512,
            time_samples: 201,
            output: OutputAxis::Periodic { intervals: 256 },
            steps_per_sample: 5,
        }
    }

    pub fn kdv_sine() -> Self {
        Self {
            name: "kdv-sine".into(),
            equation: Equation::KdV,
            initial: InitialCondition::KdvSine,
            lower: -20.0,
            upper: 20.0,
            t_max: 40.0,
            ..Self::burgers()
        }
    }

    pub fn kdv_exp_cos() -> Self {
        Self {
            name: "kdv-exp-cos".into(),
            initial: InitialCondition::KdvExpCos,
            ..Self::kdv_sine()
        }
    }

    pub fn ks() -> Self {
        Self {
            name: "ks".into(),
            equation: Equation::KuramotoSivashinsky {
                nu: -1.0,
                mu: 1.0,
                lambda: 1.0,
            },
            initial: InitialCondition::KsCosSine,
            lower: -5.0,
            upper: 5.0,
            t_max: 5.0,
            output: OutputAxis::Interpolated { points: 256 },
            ..Self::burgers()
        }
    }

    pub fn allen_cahn() -> Self {
        Self {
            name: "allen-cahn".into(),
            equation: Equation::AllenCahn { epsilon: 0.003 },
            initial: InitialCondition::AllenCahn,
            lower: -20.0,
            upper: 20.0,
            t_max: 40.0,
            // The initial condition oscillates at 200 periods per domain.
            modes: 1024,
            ..Self::burgers()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "burgers" => Some(Self::burgers()),
            "kdv-sine" => Some(Self::kdv_sine()),
            "kdv-exp-cos" => Some(Self::kdv_exp_cos()),
            "ks" => Some(Self::ks()),
            "allen-cahn" => Some(Self::allen_cahn()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 5] =
        ["burgers", "kdv-sine", "kdv-exp-cos", "ks", "allen-cahn"];

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.upper > self.lower) {
            problems.push(format!(
                "empty spatial interval [{}, {}]",
                self.lower, self.upper
            ));
        }
        if !(self.t_max > 0.0) {
            problems.push(format!("final time must be positive, got {}", self.t_max));
        }
        if self.modes < 8 || self.modes % 2 != 0 {
            problems.push(format!(
                "mode count must be even and at least 8, got {}",
                self.modes
            ));
        }
        if self.time_samples < 2 || self.steps_per_sample == 0 {
            problems.push("need at least two time samples and one step per sample".into());
        }
        match self.output {
            OutputAxis::Periodic { intervals } => {
                if intervals == 0 || self.modes % intervals != 0 {
                    problems.push(format!(
                        "{intervals} output intervals do not divide {} modes",
                        self.modes
                    ));
                }
            }
            OutputAxis::Interpolated { points } => {
                if points < 2 {
                    problems.push("interpolated output needs at least two points".into());
                }
            }
        }
        let finite = match self.equation {
            Equation::Burgers { nu } => nu.is_finite(),
            Equation::KdV => true,
            Equation::KuramotoSivashinsky { nu, mu, lambda } => {
                nu.is_finite() && mu.is_finite() && lambda.is_finite()
            }
            Equation::AllenCahn { epsilon } => epsilon.is_finite(),
        };
        if !finite {
            problems.push("equation parameters must be finite".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn dt(&self) -> f64 {
        self.t_max / ((self.time_samples - 1) * self.steps_per_sample) as f64
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    /// Angular wavenumbers in FFT order with the Nyquist mode set to zero.
    fn wavenumbers(&self) -> Vec<f64> {
        let n = self.modes as i64;
        let scale = 2.0 * PI / self.length();
        (0..n)
            .map(|j| match j {
                j if j < n / 2 => j as f64 * scale,
                j if j == n / 2 => 0.0,
                j => (j - n) as f64 * scale,
            })
            .collect()
    }

    fn linear_symbol(&self, k: f64) -> Complex64 {
        match self.equation {
            Equation::Burgers { nu } => Complex64::new(-nu * k * k, 0.0),
            Equation::KdV => Complex64::new(0.0, k * k * k),
            Equation::KuramotoSivashinsky { nu, mu, .. } => {
                Complex64::new(-nu * k * k - mu * k.powi(4), 0.0)
            }
            Equation::AllenCahn { epsilon } => Complex64::new(1.0 - epsilon * k * k, 0.0),
        }
    }
}

/// The solution on the computational grid at every output time.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub config: SolverConfig,
    pub times: Vec<f64>,
    /// Computational grid `lower + j L / modes`.
    pub x: Vec<f64>,
    /// `fields[[i, j]]` = u(times[i], x[j]).
    pub fields: Array2<f64>,
}

struct Spectral {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    n: usize,
    k: Vec<f64>,
}

impl Spectral {
    fn new(cfg: &SolverConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fwd: planner.plan_fft_forward(cfg.modes),
            inv: planner.plan_fft_inverse(cfg.modes),
            n: cfg.modes,
            k: cfg.wavenumbers(),
        }
    }

    fn forward(&self, u: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = u.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        buf[self.n / 2] = Complex64::new(0.0, 0.0);
        buf
    }

    fn inverse(&self, v: &[Complex64]) -> Vec<f64> {
        let mut buf = v.to_vec();
        self.inv.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    /// Spectral derivative of order `order` on the computational grid.
    fn derivative(&self, u: &[f64], order: u32) -> Vec<f64> {
        let mut v = self.forward(u);
        for (c, &k) in v.iter_mut().zip(&self.k) {
            *c *= Complex64::new(0.0, k).powu(order);
        }
        self.inverse(&v)
    }
}

fn nonlinear(eq: &Equation, sp: &Spectral, v: &[Complex64]) -> Vec<Complex64> {
    let u = sp.inverse(v);
    match *eq {
        Equation::AllenCahn { .. } => sp.forward(&u.iter().map(|x| -x * x * x).collect::<Vec<_>>()),
        _ => {
            let lambda = match *eq {
                Equation::KuramotoSivashinsky { lambda, .. } => lambda,
                _ => 1.0,
            };
            // −λ u u_x = −(λ/2) ∂x(u²)
            let mut w = sp.forward(&u.iter().map(|x| x * x).collect::<Vec<_>>());
            for (c, &k) in w.iter_mut().zip(&sp.k) {
                *c *= Complex64::new(0.0, -0.5 * lambda * k);
            }
            w
        }
    }
}

/// ETDRK4 coefficients for step `h` and linear symbol `l`.
fn etdrk4_coefficients(h: f64, l: Complex64) -> [Complex64; 6] {
    let hl = h * l;
    let e = hl.exp();
    let e2 = (hl / 2.0).exp();
    let mut q = Complex64::new(0.0, 0.0);
    let mut f1 = q;
    let mut f2 = q;
    let mut f3 = q;
    for j in 0..CONTOUR_POINTS {
        let theta = 2.0 * PI * (j as f64 + 0.5) / CONTOUR_POINTS as f64;
        let z = hl + Complex64::from_polar(1.0, theta);
        let ez = z.exp();
        let z3 = z * z * z;
        q += ((z / 2.0).exp() - 1.0) / z;
        f1 += (-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3;
        f2 += (2.0 + z + ez * (z - 2.0)) / z3;
        f3 += (-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3;
    }
    let m = CONTOUR_POINTS as f64;
    [e, e2, q * h / m, f1 * h / m, f2 * h / m, f3 * h / m]
}

/// Integrate the configured equation, storing the field at every output time.
pub fn trajectory(cfg: &SolverConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let sp = Spectral::new(cfg);
    let n = cfg.modes;
    let h = cfg.dt();
    let x: Vec<f64> = (0..n)
        .map(|j| cfg.lower + cfg.length() * j as f64 / n as f64)
        .collect();
    let coeffs: Vec<[Complex64; 6]> =
        sp.k.iter()
            .map(|&k| etdrk4_coefficients(h, cfg.linear_symbol(k)))
            .collect();

    let u0: Vec<f64> = x.iter().map(|&x| cfg.initial.eval(x)).collect();
    let mut v = sp.forward(&u0);
    let mut fields = Array2::zeros((cfg.time_samples, n));
    fields.row_mut(0).assign(&ndarray::Array1::from(u0));
    let times: Vec<f64> = (0..cfg.time_samples)
        .map(|i| cfg.t_max * i as f64 / (cfg.time_samples - 1) as f64)
        .collect();

    let mut a = vec![Complex64::new(0.0, 0.0); n];
    let mut b = a.clone();
    let mut c = a.clone();
    for sample in 1..cfg.time_samples {
        for step in 0..cfg.steps_per_sample {
            let nv = nonlinear(&cfg.equation, &sp, &v);
            for j in 0..n {
                let [_, e2, q, ..] = coeffs[j];
                a[j] = e2 * v[j] + q * nv[j];
            }
            let na = nonlinear(&cfg.equation, &sp, &a);
            for j in 0..n {
                let [_, e2, q, ..] = coeffs[j];
                b[j] = e2 * v[j] + q * na[j];
            }
            let nb = nonlinear(&cfg.equation, &sp, &b);
            for j in 0..n {
                let [_, e2, q, ..] = coeffs[j];
                c[j] = e2 * a[j] + q * (2.0 * nb[j] - nv[j]);
            }
            let nc = nonlinear(&cfg.equation, &sp, &c);
            for j in 0..n {
                let [e, _, _, f1, f2, f3] = coeffs[j];
                v[j] = e * v[j] + nv[j] * f1 + 2.0 * (na[j] + nb[j]) * f2 + nc[j] * f3;
            }
            v[n / 2] = Complex64::new(0.0, 0.0);
            if v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                let t = times[sample - 1] + (step + 1) as f64 * h;
                return Err(Error::Numerical(format!(
                    "{} solution blew up at t = {t}",
                    cfg.name
                )));
            }
        }
        fields
            .row_mut(sample)
            .assign(&ndarray::Array1::from(sp.inverse(&v)));
    }
    Ok(Trajectory {
        config: cfg.clone(),
        times,
        x,
        fields,
    })
}

impl Trajectory {
    /// Spatial output axis and the field sampled on it at time index `i`.
    fn output_row(&self, i: usize) -> Vec<f64> {
        let cfg = &self.config;
        let row = self.fields.row(i);
        match cfg.output {
            OutputAxis::Periodic { intervals } => {
                let stride = cfg.modes / intervals;
                (0..=intervals)
                    .map(|j| row[(j * stride) % cfg.modes])
                    .collect()
            }
            OutputAxis::Interpolated { .. } => {
                let n = cfg.modes;
                let mut v: Vec<Complex64> = row.iter().map(|&u| Complex64::new(u, 0.0)).collect();
                FftPlanner::new().plan_fft_forward(n).process(&mut v);
                v[n / 2] = Complex64::new(0.0, 0.0);
                let k = cfg.wavenumbers();
                output_x(cfg)
                    .iter()
                    .map(|&x| {
                        let s = x - cfg.lower;
                        v.iter()
                            .zip(&k)
                            .map(|(c, &k)| (c * Complex64::from_polar(1.0, k * s)).re)
                            .sum::<f64>()
                            / n as f64
                    })
                    .collect()
            }
        }
    }

    pub fn to_grid(&self) -> Result<GridDataset> {
        let cfg = &self.config;
        let values: Vec<f64> = (0..self.times.len())
            .flat_map(|i| self.output_row(i))
            .collect();
        GridDataset::new(
            vec![self.times.clone(), output_x(cfg)],
            values,
            format!(
                "equation={} domain=[{}, {}] t_max={} modes={} dt={}",
                cfg.equation,
                cfg.lower,
                cfg.upper,
                cfg.t_max,
                cfg.modes,
                cfg.dt()
            ),
        )
    }

    /// RMS of the PDE residual over interior output times, with spectral
    /// space derivatives and fourth-order central time differences, divided
    /// by the RMS of the field.
    pub fn relative_residual(&self) -> f64 {
        let cfg = &self.config;
        let sp = Spectral::new(cfg);
        let dt = self.times[1] - self.times[0];
        let mut res2 = 0.0;
        let mut field2 = 0.0;
        for i in 2..self.times.len() - 2 {
            let u: Vec<f64> = self.fields.row(i).to_vec();
            let ut: Vec<f64> = (0..cfg.modes)
                .map(|j| {
                    let f = |d: isize| self.fields[[(i as isize + d) as usize, j]];
                    (f(-2) - 8.0 * f(-1) + 8.0 * f(1) - f(2)) / (12.0 * dt)
                })
                .collect();
            let ux = sp.derivative(&u, 1);
            let rhs: Vec<f64> = match cfg.equation {
                Equation::Burgers { nu } => {
                    let uxx = sp.derivative(&u, 2);
                    (0..cfg.modes).map(|j| nu * uxx[j] - u[j] * ux[j]).collect()
                }
                Equation::KdV => {
                    let uxxx = sp.derivative(&u, 3);
                    (0..cfg.modes).map(|j| -u[j] * ux[j] - uxxx[j]).collect()
                }
                Equation::KuramotoSivashinsky { nu, mu, lambda } => {
                    let uxx = sp.derivative(&u, 2);
                    let uxxxx = sp.derivative(&u, 4);
                    (0..cfg.modes)
                        .map(|j| nu * uxx[j] - mu * uxxxx[j] - lambda * u[j] * ux[j])
                        .collect()
                }
                Equation::AllenCahn { epsilon } => {
                    let uxx = sp.derivative(&u, 2);
                    (0..cfg.modes)
                        .map(|j| epsilon * uxx[j] - u[j].powi(3) + u[j])
                        .collect()
                }
            };
            for j in 0..cfg.modes {
                res2 += (ut[j] - rhs[j]).powi(2);
                field2 += u[j] * u[j];
            }
        }
        (res2 / field2).sqrt()
    }
}

fn output_x(cfg: &SolverConfig) -> Vec<f64> {
    let intervals = match cfg.output {
        OutputAxis::Periodic { intervals } => intervals,
        OutputAxis::Interpolated { points } => points - 1,
    };
    (0..=intervals)
        .map(|j| cfg.lower + cfg.length() * j as f64 / intervals as f64)
        .collect()
}

/// Solve and sample on the output grid.
pub fn solve(cfg: &SolverConfig) -> Result<GridDataset> {
    trajectory(cfg)?.to_grid()
}

fn rms_difference(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Halve the time step until two successive final-time fields differ by
/// less than `tol` RMS, or `max_halvings` is reached. Returns the finer
/// solution and the configuration that produced it.
pub fn solve_converged(
    cfg: &SolverConfig,
    tol: f64,
    max_halvings: usize,
) -> Result<(GridDataset, SolverConfig)> {
    let mut cfg = cfg.clone();
    let mut prev = trajectory(&cfg)?;
    for _ in 0..max_halvings {
        let mut finer = cfg.clone();
        finer.steps_per_sample *= 2;
        let next = trajectory(&finer)?;
        let last = prev.times.len() - 1;
        let diff = rms_difference(
            prev.fields.row(last).as_slice().expect("contiguous"),
            next.fields.row(last).as_slice().expect("contiguous"),
        );
        log::debug!(
            "{}: {} steps/sample, final-time change {diff:.3e}",
            cfg.name,
            finer.steps_per_sample
        );
        cfg = finer;
        prev = next;
        if diff < tol {
            return Ok((prev.to_grid()?, cfg));
        }
    }
    log::warn!(
        "{}: time step not converged to {tol} after {max_halvings} halvings",
        cfg.name
    );
    Ok((prev.to_grid()?, cfg))
}

/// RMS change of the final-time field on the output grid when the mode
/// count is doubled and the time step halved.
pub fn self_convergence(cfg: &SolverConfig) -> Result<f64> {
    let coarse = solve(cfg)?;
    let mut fine_cfg = cfg.clone();
    fine_cfg.modes *= 2;
    fine_cfg.steps_per_sample *= 2;
    let fine = solve(&fine_cfg)?;
    let nx = coarse.axes[1].len();
    let start = coarse.values.len() - nx;
    Ok(rms_difference(
        &coarse.values[start..],
        &fine.values[start..],
    ))
}

/// `u(t, x, y) = −sin(t − x) + exp(0.05 (t − x − y)) + sin(t − y)`
pub fn wave_analytic(t: f64, x: f64, y: f64) -> f64 {
    -(t - x).sin() + (0.05 * (t - x - y)).exp() + (t - y).sin()
}

/// Closed-form second derivatives `(u_tt, u_xx, u_yy)` of [`wave_analytic`].
pub fn wave_second_derivatives(t: f64, x: f64, y: f64) -> (f64, f64, f64) {
    let e = 0.0025 * (0.05 * (t - x - y)).exp();
    let (sx, sy) = ((t - x).sin(), (t - y).sin());
    (sx + e - sy, sx + e, e - sy)
}

pub fn wave_domain() -> ProblemDomain {
    ProblemDomain {
        t_max: 10.0,
        lower: vec![-5.0, -5.0],
        upper: vec![5.0, 5.0],
    }
}

/// `n` points drawn uniformly from `(0, 10] × [−5, 5]²` with exact values.
pub fn wave_points(n: usize, seed: u64) -> Result<PointDataset> {
    if n == 0 {
        return Err(Error::config("need at least one point"));
    }
    let domain = wave_domain();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Array2::zeros((n, 3));
    for mut row in coords.rows_mut() {
        row[0] = domain.t_max - rng.random_range(0.0..domain.t_max);
        row[1] = rng.random_range(-5.0..=5.0);
        row[2] = rng.random_range(-5.0..=5.0);
    }
    let values: Vec<f64> = coords
        .rows()
        .into_iter()
        .map(|r| wave_analytic(r[0], r[1], r[2]))
        .collect();
    let clean_std = crate::data::population_std(&values);
    let mut data = PointDataset::new(coords, values, domain)?;
    data.clean_std = Some(clean_std);
    data.source = "equation=wave u=-sin(t-x)+exp(0.05(t-x-y))+sin(t-y)".into();
    data.extra.insert("seed".into(), seed.to_string());
    Ok(data)
}
