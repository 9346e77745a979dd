//! Datasets, subsampling, noise, train/test splits and their file formats.
//!
//! Point files are CSV preceded by `#` metadata lines:
//!
//! ```text
//! # pdelearn-points v1
//! # role=train
//! # noise_level=0.25
//! # t_max=10
//! # lower=-8
//! # upper=8
//! t,x,u
//! 0.35,-1.5,0.18
//! ```
//!
//! Grid files are little-endian binary: the magic `PDLGRID\0`, a `u32`
//! version, a `u32` spatial dimension, a `u32`-length-prefixed UTF-8 metadata
//! string, one `u64` length per axis (time first), every axis as `f64`s, then
//! the values in time-major order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const POINTS_HEADER: &str = "# pdelearn-points v1";
const GRID_MAGIC: &[u8; 8] = b"PDLGRID\0";
const GRID_VERSION: u32 = 1;
const AXIS_NAMES: [&str; 4] = ["t", "x", "y", "z"];

/// `(0, t_max] × [lower, upper]`, an axis-aligned space-time box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemDomain {
    pub t_max: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ProblemDomain {
    pub fn new(t_max: f64, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let d = Self {
            t_max,
            lower,
            upper,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            problems.push(format!(
                "final time must be positive and finite, got {}",
                self.t_max
            ));
        }
        if !(1..=3).contains(&self.lower.len()) || self.lower.len() != self.upper.len() {
            problems.push(format!(
                "spatial box needs 1 to 3 axes with matching bounds, got {:?} and {:?}",
                self.lower, self.upper
            ));
        }
        for (a, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                problems.push(format!(
                    "axis {} has empty range [{lo}, {hi}]",
                    AXIS_NAMES[a + 1]
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn spatial_dims(&self) -> usize {
        self.lower.len()
    }

    pub fn input_dim(&self) -> usize {
        1 + self.lower.len()
    }

    /// Lower and upper corners including time, with time starting at 0.
    pub fn corners(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![0.0];
        lo.extend(&self.lower);
        let mut hi = vec![self.t_max];
        hi.extend(&self.upper);
        (lo, hi)
    }

    /// Membership in the closed box `[0, t_max] × Ω`. Sampled grids include
    /// the initial time, so data may sit on `t = 0`.
    pub fn contains(&self, point: &[f64]) -> bool {
        let (lo, hi) = self.corners();
        point.len() == lo.len()
            && point
                .iter()
                .zip(lo.iter().zip(&hi))
                .all(|(p, (l, h))| l <= p && p <= h)
    }
}

/// Values on a tensor grid, time axis first.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDataset {
    pub axes: Vec<Vec<f64>>,
    /// Time-major: the last axis varies fastest.
    pub values: Vec<f64>,
    pub metadata: String,
}

impl GridDataset {
    pub fn new(axes: Vec<Vec<f64>>, values: Vec<f64>, metadata: impl Into<String>) -> Result<Self> {
        let g = Self {
            axes,
            values,
            metadata: metadata.into(),
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.axes.len()) {
            return Err(Error::config(format!(
                "grid needs 2 to 4 axes, got {}",
                self.axes.len()
            )));
        }
        for (a, axis) in self.axes.iter().enumerate() {
            if axis.is_empty() || axis.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::config(format!(
                    "grid axis {} must be non-empty and strictly increasing",
                    AXIS_NAMES[a]
                )));
            }
        }
        let n: usize = self.shape().iter().product();
        if n != self.values.len() {
            return Err(Error::config(format!(
                "grid shape {:?} needs {n} values, got {}",
                self.shape(),
                self.values.len()
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spatial_dims(&self) -> usize {
        self.axes.len() - 1
    }

    /// Coordinates of the flat index `i`.
    pub fn point(&self, mut i: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.axes.len()];
        for a in (0..self.axes.len()).rev() {
            let n = self.axes[a].len();
            p[a] = self.axes[a][i % n];
            i /= n;
        }
        p
    }

    /// The box spanned by the grid, with `t_max` at its last time sample.
    pub fn domain(&self) -> ProblemDomain {
        ProblemDomain {
            t_max: *self.axes[0].last().expect("non-empty axis"),
            lower: self.axes[1..].iter().map(|a| a[0]).collect(),
            upper: self.axes[1..]
                .iter()
                .map(|a| *a.last().expect("non-empty axis"))
                .collect(),
        }
    }

    /// Population standard deviation of every grid value.
    pub fn clean_std(&self) -> f64 {
        population_std(&self.values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&GRID_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.spatial_dims() as u32).to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        for axis in &self.axes {
            out.extend_from_slice(&(axis.len() as u64).to_le_bytes());
        }
        for v in self.axes.iter().flatten().chain(&self.values) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// True when `bytes` start like a grid file.
    pub fn has_magic(bytes: &[u8]) -> bool {
        bytes.starts_with(GRID_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, offset: 0 };
        if r.take(8)? != GRID_MAGIC {
            return Err(r.error(0, "not a grid file (bad magic)"));
        }
        let at = r.offset;
        let version = r.u32()?;
        if version != GRID_VERSION {
            return Err(r.error(at, format!("unsupported grid version {version}")));
        }
        let at = r.offset;
        let dims = r.u32()? as usize;
        if !(1..=3).contains(&dims) {
            return Err(r.error(at, format!("spatial dimension {dims} out of range")));
        }
        let len = r.u32()? as usize;
        let at = r.offset;
        let metadata = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| r.error(at, "metadata is not UTF-8"))?;
        let mut lens = Vec::with_capacity(dims + 1);
        for _ in 0..=dims {
            let at = r.offset;
            let n = usize::try_from(r.u64()?).map_err(|_| r.error(at, "axis length overflows"))?;
            lens.push(n);
        }
        let total = lens
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| r.error(r.offset, "grid size overflows"))?;
        let mut axes = Vec::with_capacity(lens.len());
        for &n in &lens {
            axes.push(r.f64s(n)?);
        }
        let values = r.f64s(total)?;
        if r.offset != bytes.len() {
            return Err(r.error(r.offset, "trailing bytes after grid values"));
        }
        Self::new(axes, values, metadata).map_err(|e| Error::parse("grid file", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { position, message } => Error::Parse {
                position: format!("{}: {position}", path.display()),
                message,
            },
            other => other,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl ByteReader<'_> {
    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::parse(format!("byte offset {offset}"), message)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .offset
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(s)
            }
            None => Err(self.error(
                self.offset,
                format!("truncated file: needed {n} more bytes"),
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| self.error(self.offset, "array size overflows"))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
        }
    }
}

/// Scattered samples `(t, X) ↦ ũ` of one system response.
#[derive(Clone, Debug, PartialEq)]
pub struct PointDataset {
    /// One row per point: `t` then the spatial coordinates.
    pub coords: Array2<f64>,
    pub values: Vec<f64>,
    pub domain: ProblemDomain,
    /// Noise standard deviation relative to `clean_std`.
    pub noise_level: f64,
    /// Standard deviation of the full noise-free data the points came from.
    pub clean_std: Option<f64>,
    pub role: Role,
    pub source: String,
    /// Free-form provenance (seeds, counts) carried through files.
    pub extra: BTreeMap<String, String>,
}

impl PointDataset {
    pub fn new(coords: Array2<f64>, values: Vec<f64>, domain: ProblemDomain) -> Result<Self> {
        let d = Self {
            coords,
            values,
            domain,
            noise_level: 0.0,
            clean_std: None,
            role: Role::Train,
            source: String::new(),
            extra: BTreeMap::new(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if self.coords.nrows() != self.values.len() {
            return Err(Error::config(format!(
                "{} coordinate rows but {} values",
                self.coords.nrows(),
                self.values.len()
            )));
        }
        if self.coords.ncols() != self.domain.input_dim() {
            return Err(Error::config(format!(
                "points have {} coordinates, domain needs {}",
                self.coords.ncols(),
                self.domain.input_dim()
            )));
        }
        for (i, row) in self.coords.rows().into_iter().enumerate() {
            let p = row.to_vec();
            if !self.domain.contains(&p) {
                return Err(Error::config(format!(
                    "point {i} {p:?} lies outside the problem domain"
                )));
            }
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("value {i} is not finite")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.values.len(), 1), self.values.clone()).expect("column")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{POINTS_HEADER}").unwrap();
        writeln!(s, "# role={}", self.role.as_str()).unwrap();
        writeln!(s, "# noise_level={}", self.noise_level).unwrap();
        if let Some(c) = self.clean_std {
            writeln!(s, "# clean_std={c}").unwrap();
        }
        writeln!(s, "# source={}", one_line(&self.source)).unwrap();
        writeln!(s, "# t_max={}", self.domain.t_max).unwrap();
        writeln!(s, "# lower={}", join(&self.domain.lower)).unwrap();
        writeln!(s, "# upper={}", join(&self.domain.upper)).unwrap();
        for (k, v) in &self.extra {
            writeln!(s, "# {}={}", one_line(k), one_line(v)).unwrap();
        }
        let names: Vec<&str> = AXIS_NAMES[..self.coords.ncols()].to_vec();
        writeln!(s, "{},u", names.join(",")).unwrap();
        for (row, v) in self.coords.rows().into_iter().zip(&self.values) {
            for c in row {
                write!(s, "{c},").unwrap();
            }
            writeln!(s, "{v}").unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::parse(format!("line {line}"), msg);
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim_end() == POINTS_HEADER => {}
            _ => return Err(err(1, format!("expected header {POINTS_HEADER:?}"))),
        }
        let mut meta = BTreeMap::new();
        let mut columns = None;
        for (n, line) in lines.by_ref() {
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest
                    .trim_start()
                    .split_once('=')
                    .ok_or_else(|| err(n, "metadata line without '='".into()))?;
                meta.insert(k.trim().to_string(), (n, v.to_string()));
            } else {
                columns = Some((n, line));
                break;
            }
        }
        let (hn, header) = columns.ok_or_else(|| err(0, "missing column header".into()))?;
        let names: Vec<&str> = header.split(',').map(str::trim).collect();
        let dims = names.len().saturating_sub(1);
        if !(2..=4).contains(&dims) || names[..dims] != AXIS_NAMES[..dims] || names[dims] != "u" {
            return Err(err(
                hn,
                format!("column header must be t,x[,y[,z]],u; got {header:?}"),
            ));
        }
        let mut take = |key: &str| meta.remove(key);
        let num = |entry: Option<(usize, String)>, key: &str| -> Result<f64> {
            let (n, v) = entry.ok_or_else(|| err(hn, format!("missing metadata key {key}")))?;
            v.trim()
                .parse()
                .map_err(|_| err(n, format!("{key} is not a number: {v:?}")))
        };
        let list = |entry: Option<(usize, String)>, key: &str| -> Result<Vec<f64>> {
            let (n, v) = entry.ok_or_else(|| err(hn, format!("missing metadata key {key}")))?;
            v.split_whitespace()
                .map(|x| {
                    x.parse()
                        .map_err(|_| err(n, format!("{key} has a non-numeric entry {x:?}")))
                })
                .collect()
        };
        let role = match take("role") {
            Some((_, r)) if r.trim() == "train" => Role::Train,
            Some((_, r)) if r.trim() == "test" => Role::Test,
            Some((n, r)) => return Err(err(n, format!("role must be train or test, got {r:?}"))),
            None => Role::Train,
        };
        let noise_level = num(take("noise_level"), "noise_level")?;
        let clean_std = match take("clean_std") {
            Some(e) => Some(num(Some(e), "clean_std")?),
            None => None,
        };
        let source = take("source").map(|(_, s)| s).unwrap_or_default();
        let domain = ProblemDomain {
            t_max: num(take("t_max"), "t_max")?,
            lower: list(take("lower"), "lower")?,
            upper: list(take("upper"), "upper")?,
        };
        let extra = meta.into_iter().map(|(k, (_, v))| (k, v)).collect();

        let mut flat = Vec::new();
        let mut values = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dims + 1 {
                return Err(err(
                    n,
                    format!("expected {} fields, found {}", dims + 1, fields.len()),
                ));
            }
            for (k, f) in fields.iter().enumerate() {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| err(n, format!("field {} is not a number: {f:?}", k + 1)))?;
                if k < dims {
                    flat.push(v);
                } else {
                    values.push(v);
                }
            }
        }
        let coords = Array2::from_shape_vec((values.len(), dims), flat).expect("rectangular");
        let data = Self {
            coords,
            values,
            domain,
            noise_level,
            clean_std,
            role,
            source,
            extra,
        };
        data.validate()
            .map_err(|e| Error::parse("point file", e.to_string()))?;
        Ok(data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|e| match e {
            Error::Parse { position, message } => Error::Parse {
                position: format!("{}: {position}", path.display()),
                message,
            },
            other => other,
        })
    }
}

fn one_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn from_indices(grid: &GridDataset, indices: &[usize]) -> Result<PointDataset> {
    let d = grid.axes.len();
    let mut coords = Array2::zeros((indices.len(), d));
    for (r, &i) in indices.iter().enumerate() {
        for (c, v) in grid.point(i).into_iter().enumerate() {
            coords[[r, c]] = v;
        }
    }
    let mut data = PointDataset::new(
        coords,
        indices.iter().map(|&i| grid.values[i]).collect(),
        grid.domain(),
    )?;
    data.clean_std = Some(grid.clean_std());
    data.source = grid.metadata.clone();
    Ok(data)
}

/// `n` distinct grid points drawn uniformly without replacement.
pub fn subsample(grid: &GridDataset, n: usize, seed: u64) -> Result<PointDataset> {
    if n > grid.len() {
        return Err(Error::config(format!(
            "cannot draw {n} points from a grid of {}",
            grid.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rand::seq::index::sample(&mut rng, grid.len(), n).into_vec();
    from_indices(grid, &idx)
}

fn add_noise_with<R: Rng>(data: &PointDataset, q: f64, rng: &mut R) -> Result<PointDataset> {
    if !(q >= 0.0 && q.is_finite()) {
        return Err(Error::config(format!(
            "noise level must be non-negative, got {q}"
        )));
    }
    let sigma_nf = data.clean_std.ok_or_else(|| {
        Error::config("noise needs the standard deviation of the full noise-free data")
    })?;
    let mut out = data.clone();
    out.noise_level = q;
    if q > 0.0 {
        let normal = Normal::new(0.0, q * sigma_nf).map_err(|e| Error::config(e.to_string()))?;
        out.values.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    Ok(out)
}

/// Add i.i.d. `N(0, (q σ_nf)²)` noise, with `σ_nf` the standard deviation of the
/// full noise-free data the points were drawn from.
pub fn add_noise(data: &PointDataset, q: f64, seed: u64) -> Result<PointDataset> {
    add_noise_with(data, q, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn default_test_size(n_train: usize) -> usize {
    n_train.div_ceil(5)
}

/// Disjoint train and test subsamples, both corrupted at noise level `q` with
/// independent noise draws.
pub fn split_train_test(
    grid: &GridDataset,
    n_train: usize,
    n_test: usize,
    q: f64,
    sample_seed: u64,
    noise_seed: u64,
) -> Result<(PointDataset, PointDataset)> {
    split_with(
        grid.len(),
        |idx| from_indices(grid, idx),
        n_train,
        n_test,
        q,
        sample_seed,
        noise_seed,
    )
}

/// [`split_train_test`] drawing from the rows of an existing point set, whose
/// `clean_std` must describe the full noise-free data.
pub fn split_points(
    points: &PointDataset,
    n_train: usize,
    n_test: usize,
    q: f64,
    sample_seed: u64,
    noise_seed: u64,
) -> Result<(PointDataset, PointDataset)> {
    let pick = |idx: &[usize]| {
        let mut out = points.clone();
        out.coords = points.coords.select(ndarray::Axis(0), idx);
        out.values = idx.iter().map(|&i| points.values[i]).collect();
        out.validate()?;
        Ok(out)
    };
    split_with(
        points.len(),
        pick,
        n_train,
        n_test,
        q,
        sample_seed,
        noise_seed,
    )
}

fn split_with(
    len: usize,
    pick: impl Fn(&[usize]) -> Result<PointDataset>,
    n_train: usize,
    n_test: usize,
    q: f64,
    sample_seed: u64,
    noise_seed: u64,
) -> Result<(PointDataset, PointDataset)> {
    let total = n_train
        .checked_add(n_test)
        .filter(|&t| t <= len)
        .ok_or_else(|| {
            Error::config(format!(
                "{n_train} training plus {n_test} test points exceed the {len} available"
            ))
        })?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let idx = rand::seq::index::sample(&mut rng, len, total).into_vec();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut train = add_noise_with(&pick(&idx[..n_train])?, q, &mut noise_rng)?;
    let mut test = add_noise_with(&pick(&idx[n_train..])?, q, &mut noise_rng)?;
    train.role = Role::Train;
    test.role = Role::Test;
    for d in [&mut train, &mut test] {
        d.extra
            .insert("sample_seed".into(), sample_seed.to_string());
        d.extra.insert("noise_seed".into(), noise_seed.to_string());
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn grid(nt: usize, nx: usize) -> GridDataset {
        let t: Vec<f64> = (0..nt).map(|i| i as f64 * 0.5).collect();
        let x: Vec<f64> = (0..nx)
            .map(|i| -1.0 + 2.0 * i as f64 / (nx - 1) as f64)
            .collect();
        let values = t
            .iter()
            .flat_map(|&t| x.iter().map(move |&x| (x * 3.0).sin() * (1.0 + t)))
            .collect();
        GridDataset::new(vec![t, x], values, "test grid").unwrap()
    }

    fn key(row: ndarray::ArrayView1<f64>) -> Vec<u64> {
        row.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn domain_validation() {
        assert!(ProblemDomain::new(1.0, vec![0.0], vec![1.0]).is_ok());
        assert!(ProblemDomain::new(0.0, vec![0.0], vec![1.0]).is_err());
        assert!(ProblemDomain::new(1.0, vec![1.0], vec![1.0]).is_err());
        assert!(ProblemDomain::new(1.0, vec![0.0; 4], vec![1.0; 4]).is_err());
        let d = ProblemDomain::new(2.0, vec![-1.0, 0.0], vec![1.0, 3.0]).unwrap();
        assert!(d.contains(&[0.0, -1.0, 3.0]));
        assert!(!d.contains(&[2.1, 0.0, 0.0]));
    }

    #[test]
    fn full_subsample_takes_every_point_once() {
        let g = grid(5, 7);
        let s = subsample(&g, g.len(), 3).unwrap();
        let seen: HashSet<_> = s.coords.rows().into_iter().map(key).collect();
        assert_eq!(seen.len(), g.len());
        let one = subsample(&g, 1, 3).unwrap();
        assert_eq!(one.len(), 1);
        assert!(g.domain().contains(&one.coords.row(0).to_vec()));
        assert!(subsample(&g, g.len() + 1, 3).is_err());
    }

    #[test]
    fn subsample_selection_is_uniform() {
        // 40 cells, draw 10 per trial: each cell selected with p = 1/4.
        let g = grid(4, 10);
        let trials = 4000;
        let mut counts = vec![0usize; g.len()];
        for s in 0..trials {
            let d = subsample(&g, 10, s).unwrap();
            let set: HashSet<_> = d.coords.rows().into_iter().map(key).collect();
            assert_eq!(set.len(), 10);
            for r in d.coords.rows() {
                let i = (0..g.len()).find(|&i| g.point(i) == r.to_vec()).unwrap();
                counts[i] += 1;
            }
        }
        let p = 0.25;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sd + 1.0,
                "{c} vs {mean} ± {sd}"
            );
        }
    }

    #[test]
    fn noise_examples() {
        let g = grid(5, 7);
        let s = subsample(&g, 20, 1).unwrap();
        assert_eq!(add_noise(&s, 0.0, 9).unwrap().values, s.values);
        assert_eq!(
            add_noise(&s, 0.3, 9).unwrap(),
            add_noise(&s, 0.3, 9).unwrap()
        );
    }

    #[test]
    fn noise_level_statistic() {
        let nx = 1000;
        let g = grid(100, nx);
        let s = subsample(&g, 100_000, 2).unwrap();
        let sigma = g.clean_std();
        for q in [0.5, 0.1] {
            let noisy = add_noise(&s, q, 5).unwrap();
            let eta: Vec<f64> = noisy
                .values
                .iter()
                .zip(&s.values)
                .map(|(a, b)| a - b)
                .collect();
            let ratio = population_std(&eta) / sigma;
            assert!((ratio - q).abs() <= 0.02 * q, "q={q}: {ratio}");
        }
    }

    #[test]
    fn clean_std_is_taken_from_the_whole_grid() {
        let g = grid(6, 9);
        // A subset of only the first time slice has a different spread.
        let s = subsample(&g, 5, 4).unwrap();
        assert_eq!(s.clean_std, Some(g.clean_std()));
        assert_ne!(population_std(&s.values), g.clean_std());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let g = grid(20, 30);
        let (train, test) = split_train_test(&g, 100, default_test_size(100), 0.5, 1, 2).unwrap();
        assert_eq!(train.len(), 100);
        assert_eq!(test.len(), 20);
        assert_eq!(test.role, Role::Test);
        let (_, empty) = split_train_test(&g, 100, 0, 0.5, 1, 2).unwrap();
        assert!(empty.is_empty());
        assert!(split_train_test(&g, 500, 101, 0.5, 1, 2).is_err());
        assert_eq!(default_test_size(4000), 800);
        assert_eq!(default_test_size(1001), 201);
    }

    #[test]
    fn point_sets_split_like_grids() {
        let g = grid(20, 30);
        let all = subsample(&g, g.len(), 0).unwrap();
        let (train, test) = split_points(&all, 50, 10, 0.0, 3, 4).unwrap();
        assert_eq!((train.len(), test.len()), (50, 10));
        assert_eq!((train.role, test.role), (Role::Train, Role::Test));
        let seen: HashSet<Vec<u64>> = train.coords.rows().into_iter().map(key).collect();
        assert!(test
            .coords
            .rows()
            .into_iter()
            .all(|r| !seen.contains(&key(r))));
        // Noise-free values stay attached to their coordinates.
        for (row, v) in train.coords.rows().into_iter().zip(&train.values) {
            let j = all
                .coords
                .rows()
                .into_iter()
                .position(|r| key(r) == key(row))
                .unwrap();
            assert_eq!(all.values[j], *v);
        }
        let (noisy, _) = split_points(&all, 50, 10, 0.3, 3, 4).unwrap();
        assert_eq!(noisy.coords, train.coords);
        assert_ne!(noisy.values, train.values);
        assert!(split_points(&all, 600, 1, 0.0, 3, 4).is_err());
    }

    proptest! {
        #[test]
        fn splits_are_disjoint(n_train in 1usize..200, n_test in 0usize..100, seed in any::<u64>()) {
            let g = grid(10, 30);
            let (train, test) = split_train_test(&g, n_train, n_test, 0.0, seed, 0).unwrap();
            let a: HashSet<_> = train.coords.rows().into_iter().map(key).collect();
            let b: HashSet<_> = test.coords.rows().into_iter().map(key).collect();
            prop_assert_eq!(a.len(), n_train);
            prop_assert_eq!(b.len(), n_test);
            prop_assert!(a.is_disjoint(&b));
        }
    }

    #[test]
    fn grid_round_trip_and_truncation() {
        let g = grid(4, 6);
        let bytes = g.to_bytes();
        assert_eq!(GridDataset::from_bytes(&bytes).unwrap(), g);
        for cut in [0, 7, 12, 20, bytes.len() - 1] {
            match GridDataset::from_bytes(&bytes[..cut]) {
                Err(Error::Parse { position, .. }) => assert!(position.starts_with("byte offset")),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.grid");
        g.save(&path).unwrap();
        assert_eq!(GridDataset::load(&path).unwrap(), g);
    }

    #[test]
    fn points_round_trip() {
        let g = grid(10, 13);
        let (mut train, _) = split_train_test(&g, 50, 10, 0.37, 8, 9).unwrap();
        train.values[0] = 0.1 + 0.2; // not representable as a short decimal
        train.extra.insert("note".into(), "a=b".into());
        let text = train.to_csv();
        assert_eq!(PointDataset::from_csv(&text).unwrap(), train);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        train.save(&path).unwrap();
        assert_eq!(PointDataset::load(&path).unwrap(), train);
    }

    #[test]
    fn malformed_point_files_report_lines() {
        let g = grid(3, 4);
        let s = subsample(&g, 5, 1).unwrap();
        let text = s.to_csv();
        let mut lines: Vec<&str> = text.lines().collect();
        let last = lines.len() - 1;
        lines[last] = "0.5,oops,1";
        match PointDataset::from_csv(&lines.join("\n")) {
            Err(Error::Parse { position, .. }) => {
                assert_eq!(position, format!("line {}", last + 1))
            }
            other => panic!("{other:?}"),
        }
        assert!(PointDataset::from_csv("t,x,u\n1,2,3").is_err());
    }

    #[test]
    fn points_outside_the_domain_are_rejected() {
        let d = ProblemDomain::new(1.0, vec![0.0], vec![1.0]).unwrap();
        let bad = PointDataset::new(ndarray::array![[0.5, 2.0]], vec![1.0], d);
        assert!(bad.is_err());
    }
}
