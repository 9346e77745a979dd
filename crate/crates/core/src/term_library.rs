//! Derivative operators, monomial library terms, and derivative evaluation
//! plans.
//!
//! Term text grammar (whitespace is insignificant):
//!
//! ```text
//! term    := factor ( '*'? factor )*
//! factor  := '(' term ')' ( '^' n )?  |  ( 'D_' var ( '^' n )? )* 'U'
//! var     := 't' | 'x' | 'y' | 'z'
//! ```
//!
//! so `(D_x U)^2 * U`, `U * (D_x U)^2` and `(D_x U)^2(U)` all name the same
//! term.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

pub const VARIABLES: [char; 4] = ['t', 'x', 'y', 'z'];

/// Partial derivative multi-index over `(t, x, y, z)`. The zero index is the
/// identity. Ordering is lexicographic with time first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DerivativeOp {
    pub orders: [u8; 4],
}

impl DerivativeOp {
    pub const IDENTITY: Self = Self { orders: [0; 4] };

    pub fn new(orders: [u8; 4]) -> Self {
        Self { orders }
    }

    /// `order`-th derivative along a single coordinate (0 = t, 1 = x, ...).
    pub fn along(axis: usize, order: u8) -> Self {
        let mut orders = [0; 4];
        orders[axis] = order;
        Self { orders }
    }

    pub fn total_order(&self) -> u32 {
        self.orders.iter().map(|&o| o as u32).sum()
    }

    pub fn is_identity(&self) -> bool {
        self.orders == [0; 4]
    }

    /// Highest coordinate index with a non-zero order.
    pub fn max_axis(&self) -> Option<usize> {
        (0..4).rev().find(|&a| self.orders[a] > 0)
    }

    /// The operator with one fewer derivative along `axis`.
    pub fn lower(&self, axis: usize) -> Option<Self> {
        (self.orders[axis] > 0).then(|| {
            let mut o = self.orders;
            o[axis] -= 1;
            Self { orders: o }
        })
    }
}

impl fmt::Display for DerivativeOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (axis, &order) in self.orders.iter().enumerate() {
            match order {
                0 => {}
                1 => write!(f, "D_{} ", VARIABLES[axis])?,
                n => write!(f, "D_{}^{} ", VARIABLES[axis], n)?,
            }
        }
        f.write_str("U")
    }
}

/// A monomial in derivatives of U: factors sorted ascending by operator, each
/// operator at most once, powers ≥ 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LibraryTerm {
    factors: Vec<(DerivativeOp, u32)>,
}

impl LibraryTerm {
    /// Canonicalise an arbitrary list of factors, merging repeats.
    pub fn new(factors: impl IntoIterator<Item = (DerivativeOp, u32)>) -> Result<Self> {
        let mut merged: BTreeMap<DerivativeOp, u32> = BTreeMap::new();
        for (op, p) in factors {
            if p == 0 {
                return Err(Error::config(format!("factor {op} has power 0")));
            }
            *merged.entry(op).or_default() += p;
        }
        if merged.is_empty() {
            return Err(Error::config("a term needs at least one factor"));
        }
        Ok(Self {
            factors: merged.into_iter().collect(),
        })
    }

    pub fn single(op: DerivativeOp) -> Self {
        Self {
            factors: vec![(op, 1)],
        }
    }

    pub fn factors(&self) -> &[(DerivativeOp, u32)] {
        &self.factors
    }

    pub fn degree(&self) -> u32 {
        self.factors.iter().map(|&(_, p)| p).sum()
    }

    pub fn max_order(&self) -> u32 {
        self.factors
            .iter()
            .map(|(op, _)| op.total_order())
            .max()
            .unwrap_or(0)
    }

    pub fn ops(&self) -> impl Iterator<Item = DerivativeOp> + '_ {
        self.factors.iter().map(|&(op, _)| op)
    }

    /// Every factor parenthesised, highest operator first: `(D_x U)^2(U)`.
    pub fn render_factors(&self) -> String {
        let mut s = String::new();
        for &(op, p) in self.factors.iter().rev() {
            s.push('(');
            s.push_str(&op.to_string());
            s.push(')');
            if p > 1 {
                s.push_str(&format!("^{p}"));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Parser::new(text).parse_all()
    }
}

/// A lone first-power factor renders bare (`D_x^2 U`); anything else uses
/// [`LibraryTerm::render_factors`].
impl fmt::Display for LibraryTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.factors.as_slice() {
            [(op, 1)] => write!(f, "{op}"),
            _ => f.write_str(&self.render_factors()),
        }
    }
}

impl std::str::FromStr for LibraryTerm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

struct Parser<'a> {
    text: &'a str,
    chars: Vec<(usize, char)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            text,
            chars: text.char_indices().collect(),
            pos: 0,
        }
    }

    fn error(&self, message: impl Into<String>) -> Error {
        let column = self
            .chars
            .get(self.pos)
            .map_or(self.text.len(), |&(i, _)| i)
            + 1;
        Error::parse(format!("column {column} of {:?}", self.text), message)
    }

    fn skip_ws(&mut self) {
        while self
            .chars
            .get(self.pos)
            .is_some_and(|(_, c)| c.is_whitespace())
        {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).map(|&(_, c)| c)
    }

    fn expect(&mut self, want: char) -> Result<()> {
        match self.peek() {
            Some(c) if c == want => {
                self.pos += 1;
                Ok(())
            }
            Some(c) => Err(self.error(format!("expected '{want}', found '{c}'"))),
            None => Err(self.error(format!("expected '{want}', found end of input"))),
        }
    }

    fn number(&mut self) -> Result<u32> {
        self.skip_ws();
        let start = self.pos;
        while self
            .chars
            .get(self.pos)
            .is_some_and(|(_, c)| c.is_ascii_digit())
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected a positive integer exponent"));
        }
        let digits: String = self.chars[start..self.pos]
            .iter()
            .map(|&(_, c)| c)
            .collect();
        let n: u32 = digits.parse().map_err(|_| {
            self.pos = start;
            self.error("exponent too large")
        })?;
        if n == 0 {
            self.pos = start;
            return Err(self.error("exponent must be at least 1"));
        }
        Ok(n)
    }

    fn parse_all(mut self) -> Result<LibraryTerm> {
        let factors = self.term()?;
        if let Some(c) = self.peek() {
            return Err(self.error(format!("unexpected '{c}'")));
        }
        LibraryTerm::new(factors).map_err(|e| self.error(e.to_string()))
    }

    fn term(&mut self) -> Result<Vec<(DerivativeOp, u32)>> {
        let mut factors = self.factor()?;
        loop {
            match self.peek() {
                Some('*') => {
                    self.pos += 1;
                    factors.extend(self.factor()?);
                }
                Some('(') | Some('D') | Some('U') => factors.extend(self.factor()?),
                _ => return Ok(factors),
            }
        }
    }

    fn factor(&mut self) -> Result<Vec<(DerivativeOp, u32)>> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let inner = self.term()?;
                self.expect(')')?;
                let power = if self.peek() == Some('^') {
                    self.pos += 1;
                    self.number()?
                } else {
                    1
                };
                Ok(inner.into_iter().map(|(op, p)| (op, p * power)).collect())
            }
            Some('D') | Some('U') => Ok(vec![(self.derivative()?, 1)]),
            Some(c) => Err(self.error(format!("expected 'U', 'D_' or '(', found '{c}'"))),
            None => Err(self.error("expected a factor, found end of input")),
        }
    }

    fn derivative(&mut self) -> Result<DerivativeOp> {
        let mut orders = [0u8; 4];
        loop {
            match self.peek() {
                Some('U') => {
                    self.pos += 1;
                    return Ok(DerivativeOp { orders });
                }
                Some('D') => {
                    self.pos += 1;
                    // `D_` is one token; no whitespace inside.
                    if self.chars.get(self.pos).map(|&(_, c)| c) != Some('_') {
                        return Err(self.error("expected '_' after 'D'"));
                    }
                    self.pos += 1;
                    let var = self.chars.get(self.pos).map(|&(_, c)| c);
                    let axis = match var.and_then(|v| VARIABLES.iter().position(|&c| c == v)) {
                        Some(a) => a,
                        None => {
                            return Err(self.error(match var {
                                Some(v) => {
                                    format!("unknown variable '{v}' (expected one of t, x, y, z)")
                                }
                                None => "expected a variable after 'D_'".into(),
                            }))
                        }
                    };
                    self.pos += 1;
                    let order = if self.peek() == Some('^') {
                        self.pos += 1;
                        self.number()?
                    } else {
                        1
                    };
                    let total = orders[axis] as u32 + order;
                    orders[axis] = u8::try_from(total)
                        .map_err(|_| self.error("derivative order too large"))?;
                }
                Some(c) => return Err(self.error(format!("expected 'D_' or 'U', found '{c}'"))),
                None => return Err(self.error("expected 'U', found end of input")),
            }
        }
    }
}

/// Every multiset of size 1..=`max_degree` over `derivs`, grouped by degree.
/// Within a degree, terms follow the lexicographic order of their sorted
/// operator indices.
pub fn enumerate_terms(derivs: &[DerivativeOp], max_degree: u32) -> Vec<LibraryTerm> {
    let ops: Vec<DerivativeOp> = derivs
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = Vec::new();
    if ops.is_empty() {
        return out;
    }
    for degree in 1..=max_degree as usize {
        // Non-decreasing index sequences of length `degree`, in lex order.
        let mut idx = vec![0usize; degree];
        loop {
            let term = LibraryTerm::new(idx.iter().map(|&i| (ops[i], 1))).expect("non-empty term");
            out.push(term);
            let Some(k) = (0..degree).rev().find(|&k| idx[k] + 1 < ops.len()) else {
                break;
            };
            let next = idx[k] + 1;
            idx[k..].iter_mut().for_each(|v| *v = next);
        }
    }
    out
}

/// Left-hand side plus an ordered list of candidate right-hand-side terms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Library {
    pub lhs: LibraryTerm,
    pub rhs: Vec<LibraryTerm>,
    pub spatial_dims: usize,
}

#[derive(Serialize, Deserialize)]
struct LibraryFile {
    lhs: String,
    rhs: Vec<String>,
}

impl Library {
    pub fn new(lhs: LibraryTerm, rhs: Vec<LibraryTerm>, spatial_dims: usize) -> Result<Self> {
        let mut problems = Vec::new();
        if !(1..=3).contains(&spatial_dims) {
            problems.push(format!(
                "spatial dimension must be 1, 2 or 3, got {spatial_dims}"
            ));
        }
        if rhs.is_empty() {
            problems.push("library needs at least one right-hand-side term".into());
        }
        let mut seen = BTreeSet::new();
        for t in &rhs {
            if !seen.insert(t) {
                problems.push(format!("duplicate right-hand-side term {t}"));
            }
            if *t == lhs {
                problems.push(format!(
                    "right-hand-side term {t} equals the left-hand side"
                ));
            }
        }
        for t in std::iter::once(&lhs).chain(&rhs) {
            for op in t.ops() {
                if op.max_axis().is_some_and(|a| a > spatial_dims) {
                    problems.push(format!("term {t} differentiates along a coordinate beyond {spatial_dims} spatial dimension(s)"));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self {
            lhs,
            rhs,
            spatial_dims,
        })
    }

    pub fn len(&self) -> usize {
        self.rhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.is_empty()
    }

    pub fn max_order(&self) -> u32 {
        std::iter::once(&self.lhs)
            .chain(&self.rhs)
            .map(LibraryTerm::max_order)
            .max()
            .unwrap_or(0)
    }

    /// Every operator appearing in some term.
    pub fn ops(&self) -> BTreeSet<DerivativeOp> {
        std::iter::once(&self.lhs)
            .chain(&self.rhs)
            .flat_map(|t| t.ops())
            .collect()
    }

    pub fn from_toml_str(text: &str, spatial_dims: usize) -> Result<Self> {
        let file: LibraryFile =
            toml::from_str(text).map_err(|e| Error::parse("library file", e.to_string()))?;
        let lhs = LibraryTerm::parse(&file.lhs)?;
        let rhs = file
            .rhs
            .iter()
            .map(|t| LibraryTerm::parse(t))
            .collect::<Result<Vec<_>>>()?;
        Self::new(lhs, rhs, spatial_dims)
    }

    pub fn to_toml_string(&self) -> String {
        let file = LibraryFile {
            lhs: self.lhs.to_string(),
            rhs: self.rhs.iter().map(ToString::to_string).collect(),
        };
        toml::to_string(&file).expect("library serialises")
    }

    pub fn load(path: &Path, spatial_dims: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, spatial_dims).map_err(|e| match e {
            Error::Parse { position, message } => Error::Parse {
                position: format!("{}: {position}", path.display()),
                message,
            },
            other => other,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanStep {
    pub op: DerivativeOp,
    /// Operator this one is obtained from by a single differentiation along
    /// `axis`; `None` only for the identity.
    pub from: Option<(DerivativeOp, usize)>,
}

/// Order in which to compute partial derivatives so each is produced exactly
/// once from an already computed lower-order one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPlan {
    pub steps: Vec<PlanStep>,
}

impl EvalPlan {
    pub fn build(lib: &Library) -> Self {
        Self::for_ops(lib.ops())
    }

    pub fn for_ops(needed: BTreeSet<DerivativeOp>) -> Self {
        let mut have: BTreeSet<DerivativeOp> = needed;
        have.insert(DerivativeOp::IDENTITY);
        let mut from = HashMap::new();
        // Highest orders first so that intermediates added along the way are
        // themselves resolved later in the sweep.
        let mut pending: Vec<DerivativeOp> = have.iter().copied().collect();
        pending.sort_by_key(|op| (op.total_order(), *op));
        while let Some(op) = pending.pop() {
            if op.is_identity() || from.contains_key(&op) {
                continue;
            }
            let candidates: Vec<(DerivativeOp, usize)> =
                (0..4).filter_map(|a| op.lower(a).map(|p| (p, a))).collect();
            let choice = candidates
                .iter()
                .copied()
                .find(|(p, _)| have.contains(p))
                .unwrap_or(candidates[0]);
            from.insert(op, choice);
            if have.insert(choice.0) {
                let pos = pending
                    .iter()
                    .position(|q| (q.total_order(), *q) > (choice.0.total_order(), choice.0))
                    .unwrap_or(pending.len());
                pending.insert(pos, choice.0);
            }
        }
        let mut steps: Vec<PlanStep> = have
            .into_iter()
            .map(|op| PlanStep {
                op,
                from: from.get(&op).copied(),
            })
            .collect();
        steps.sort_by_key(|s| (s.op.total_order(), s.op));
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn contains(&self, op: &DerivativeOp) -> bool {
        self.steps.iter().any(|s| s.op == *op)
    }
}

/// Graph nodes for each partial derivative and each library term.
#[derive(Clone, Debug)]
pub struct TermNodes {
    pub derivatives: BTreeMap<DerivativeOp, NodeId>,
    pub lhs: NodeId,
    pub rhs: Vec<NodeId>,
}

/// Build the partial derivatives of `u` with respect to the coordinate matrix
/// `input` following `plan`, then every term of `lib` as a product of powers.
/// Results are graph nodes, so they take part in parameter gradients.
pub fn evaluate_terms(
    g: &mut Graph,
    input: NodeId,
    u: NodeId,
    plan: &EvalPlan,
    lib: &Library,
) -> Result<TermNodes> {
    let dims = 1 + lib.spatial_dims;
    if let Some(v) = g.stored_value(input) {
        if v.ncols() != dims {
            return Err(Error::config(format!(
                "library expects {dims} coordinates per point, got {}",
                v.ncols()
            )));
        }
    }
    let mut derivatives = BTreeMap::new();
    let mut units: HashMap<usize, NodeId> = HashMap::new();
    for step in &plan.steps {
        let node = match step.from {
            None => u,
            Some((pred, axis)) => {
                if axis >= dims {
                    return Err(Error::config(format!(
                        "{} needs coordinate {axis}",
                        step.op
                    )));
                }
                let base = *derivatives.get(&pred).ok_or_else(|| {
                    Error::config(format!("plan computes {} before {pred}", step.op))
                })?;
                let e = *units.entry(axis).or_insert_with(|| {
                    let mut row = Array2::zeros((1, dims));
                    row[[0, axis]] = 1.0;
                    g.constant(row)
                });
                match g.differentiate_along(base, input, e) {
                    Some(d) => d,
                    None => g.scalar(0.0),
                }
            }
        };
        derivatives.insert(step.op, node);
    }
    let build = |g: &mut Graph, term: &LibraryTerm| -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for &(op, p) in term.factors() {
            let d = *derivatives
                .get(&op)
                .ok_or_else(|| Error::config(format!("plan does not cover {op}")))?;
            let f = if p == 1 { d } else { g.powi(d, p) };
            acc = Some(match acc {
                None => f,
                Some(a) => g.mul(a, f),
            });
        }
        Ok(acc.expect("terms have factors"))
    };
    let lhs = build(g, &lib.lhs)?;
    let rhs = lib
        .rhs
        .iter()
        .map(|t| build(g, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(TermNodes {
        derivatives,
        lhs,
        rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational_net::{Architecture, Layer, Network, RationalActivation};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(s: &str) -> LibraryTerm {
        LibraryTerm::parse(s).unwrap()
    }

    const BURGERS_RHS: [&str; 17] = [
        "U",
        "D_x U",
        "D_x^2 U",
        "D_x^3 U",
        "U^2",
        "(D_x U)(U)",
        "(D_x^2 U)(U)",
        "(D_x U)^2",
        "(U)^3",
        "(D_x U)(U)^2",
        "(D_x^2 U)(U)^2",
        "(D_x U)^2(U)",
        "(U)^4",
        "(D_x U)(U)^3",
        "(D_x^2 U)(U)^3",
        "(D_x U)^2(U)^2",
        "(D_x U)^3(U)",
    ];

    fn burgers() -> Library {
        let rhs = BURGERS_RHS
            .iter()
            .map(|s| LibraryTerm::parse(&s.replace("U^2", "(U)^2")).unwrap())
            .collect();
        Library::new(t("D_t U"), rhs, 1).unwrap()
    }

    #[test]
    fn parse_examples() {
        let u = t("U");
        assert_eq!(u.factors(), &[(DerivativeOp::IDENTITY, 1)]);
        assert_eq!(u.degree(), 1);

        let sq = t("(D_x U)^2 * U");
        assert_eq!(
            sq.factors(),
            &[(DerivativeOp::IDENTITY, 1), (DerivativeOp::along(1, 1), 2)]
        );
        assert_eq!(sq.degree(), 3);

        assert_eq!(t("D_x^2 U * U"), t("U * D_x^2 U"));
        assert_eq!(t("D_t D_x U"), t("D_x D_t U"));
        assert_eq!(t("D_x D_x U"), t("D_x^2 U"));
        assert_eq!(t("((D_x U)^2)^2"), t("(D_x U)^4"));
    }

    #[test]
    fn parse_errors_carry_positions() {
        for (bad, col) in [
            ("D_q U", "column 3"),
            ("(U)^0", "column 5"),
            ("U *", "column 4"),
            ("(U", "column 3"),
            ("U U)", "column 4"),
            ("", "column 1"),
        ] {
            match LibraryTerm::parse(bad) {
                Err(Error::Parse { position, .. }) => {
                    assert!(position.starts_with(col), "{bad}: {position}")
                }
                other => panic!("{bad}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn rendering() {
        assert_eq!(t("D_x^2 U").to_string(), "D_x^2 U");
        assert_eq!(t("U*D_x U").to_string(), "(D_x U)(U)");
        assert_eq!(t("U*D_x U").render_factors(), "(D_x U)(U)");
        assert_eq!(t("D_x^2 U").render_factors(), "(D_x^2 U)");
        assert_eq!(t("U * (D_x U)^2").to_string(), "(D_x U)^2(U)");
        assert_eq!(t("D_y D_t^2 U").to_string(), "D_t^2 D_y U");
    }

    #[test]
    fn enumeration_small_case() {
        let e = enumerate_terms(&[DerivativeOp::IDENTITY, DerivativeOp::along(1, 1)], 2);
        let want: Vec<LibraryTerm> = ["U", "D_x U", "(U)^2", "U * D_x U", "(D_x U)^2"]
            .iter()
            .map(|s| t(s))
            .collect();
        assert_eq!(e, want);
    }

    fn multichoose(n: u64, k: u64) -> u64 {
        // C(n + k - 1, k)
        (1..=k).fold(1, |acc, i| acc * (n + i - 1) / i)
    }

    #[test]
    fn enumeration_count_and_burgers_subset() {
        let ops: Vec<_> = (0..4).map(|o| DerivativeOp::along(1, o)).collect();
        let e = enumerate_terms(&ops, 4);
        assert_eq!(e.len(), 69);
        assert_eq!((1..=4).map(|j| multichoose(4, j)).sum::<u64>(), 69);
        for term in &burgers().rhs {
            assert!(e.contains(term), "{term} missing");
        }
    }

    /// Brute force: all tuples in [0, n)^j, sorted and deduplicated.
    fn brute_force_count(n: usize, max_degree: usize) -> usize {
        let mut set = BTreeSet::new();
        for j in 1..=max_degree {
            for code in 0..n.pow(j as u32) {
                let mut c = code;
                let mut v: Vec<usize> = (0..j)
                    .map(|_| {
                        let d = c % n;
                        c /= n;
                        d
                    })
                    .collect();
                v.sort();
                set.insert(v);
            }
        }
        set.len()
    }

    proptest! {
        #[test]
        fn enumeration_matches_brute_force(n in 1usize..=5, j in 1u32..=4) {
            let ops: Vec<_> = (0..n as u8).map(|o| DerivativeOp::along(1, o)).collect();
            let e = enumerate_terms(&ops, j);
            let distinct: BTreeSet<_> = e.iter().collect();
            prop_assert_eq!(distinct.len(), e.len());
            prop_assert_eq!(e.len(), brute_force_count(n, j as usize));
            let expect: u64 = (1..=j as u64).map(|k| multichoose(n as u64, k)).sum();
            prop_assert_eq!(e.len() as u64, expect);
        }

        #[test]
        fn permuted_factors_parse_identically(
            orders in proptest::collection::vec((0u8..3, 0u8..3, 1u32..4), 1..4),
            seed in any::<u64>(),
        ) {
            let factors: Vec<(DerivativeOp, u32)> =
                orders.iter().map(|&(a, b, p)| (DerivativeOp::new([a, b, 0, 0]), p)).collect();
            let term = LibraryTerm::new(factors).unwrap();
            let mut pieces: Vec<String> = term
                .factors()
                .iter()
                .map(|(op, p)| format!("({op})^{p}"))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..pieces.len()).rev() {
                pieces.swap(i, rng.random_range(0..=i));
            }
            prop_assert_eq!(LibraryTerm::parse(&pieces.join(" * ")).unwrap(), term.clone());
            prop_assert_eq!(LibraryTerm::parse(&term.to_string()).unwrap(), term.clone());
            prop_assert_eq!(LibraryTerm::parse(&term.render_factors()).unwrap(), term);
        }
    }

    #[test]
    fn library_validation() {
        let err =
            Library::new(t("D_t U"), vec![t("U"), t("U"), t("D_t U"), t("D_y U")], 1).unwrap_err();
        match err {
            Error::Validation(p) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
        assert!(Library::new(t("D_t U"), vec![], 1).is_err());
    }

    #[test]
    fn library_file_round_trip() {
        let lib = burgers();
        let text = lib.to_toml_string();
        assert_eq!(Library::from_toml_str(&text, 1).unwrap(), lib);
        assert!(matches!(
            Library::from_toml_str("lhs = \"D_t U\"\nrhs = [\"D_w U\"]", 1),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn burgers_plan() {
        let plan = EvalPlan::build(&burgers());
        let ops: Vec<String> = plan.steps.iter().map(|s| s.op.to_string()).collect();
        assert_eq!(ops, ["U", "D_x U", "D_t U", "D_x^2 U", "D_x^3 U"]);
        for s in &plan.steps[1..] {
            let (pred, axis) = s.from.unwrap();
            assert_eq!(pred.total_order() + 1, s.op.total_order());
            let mut raised = pred;
            raised.orders[axis] += 1;
            assert_eq!(raised, s.op);
        }
    }

    #[test]
    fn identity_only_plan() {
        let plan = EvalPlan::for_ops([DerivativeOp::IDENTITY].into());
        assert_eq!(
            plan.steps,
            vec![PlanStep {
                op: DerivativeOp::IDENTITY,
                from: None
            }]
        );
    }

    #[test]
    fn wave_plan_chains_through_first_x_derivative() {
        let rhs = [
            "U", "D_t U", "D_t^2 U", "D_t^3 U", "D_y U", "D_y^2 U", "D_y^3 U",
        ]
        .iter()
        .map(|s| t(s))
        .collect();
        let lib = Library::new(t("D_x^2 U"), rhs, 2).unwrap();
        let plan = EvalPlan::build(&lib);
        assert_eq!(plan.len(), 9);
        let dxx = plan
            .steps
            .iter()
            .find(|s| s.op == DerivativeOp::along(1, 2))
            .unwrap();
        assert_eq!(dxx.from, Some((DerivativeOp::along(1, 1), 1)));
        assert!(plan.contains(&DerivativeOp::along(1, 1)));
        // Every step's predecessor precedes it.
        for (i, s) in plan.steps.iter().enumerate() {
            if let Some((p, _)) = s.from {
                assert!(plan.steps[..i].iter().any(|q| q.op == p));
            }
        }
    }

    #[test]
    fn mixed_operator_plan_reuses_existing_predecessors() {
        let needed: BTreeSet<_> = [t("D_t D_x U"), t("D_x U"), t("D_x^2 U")]
            .iter()
            .flat_map(|t| t.ops().collect::<Vec<_>>())
            .collect();
        let plan = EvalPlan::for_ops(needed);
        assert_eq!(plan.len(), 4);
        let tx = plan
            .steps
            .iter()
            .find(|s| s.op == DerivativeOp::new([1, 1, 0, 0]))
            .unwrap();
        assert_eq!(tx.from.unwrap().0, DerivativeOp::along(1, 1));
    }

    fn linear_net() -> Network {
        // U(t, x) = 2x with an identity activation.
        Network {
            architecture: Architecture::new(2, 1, 1),
            seed: 0,
            layers: vec![
                Layer {
                    weight: vec![vec![0.0, 1.0]],
                    bias: vec![0.0],
                },
                Layer {
                    weight: vec![vec![2.0]],
                    bias: vec![0.0],
                },
            ],
            activations: vec![RationalActivation::IDENTITY],
            input_bounds: None,
        }
    }

    #[test]
    fn terms_on_a_linear_surrogate() {
        let lib = Library::new(t("D_t U"), vec![t("U"), t("(D_x U)^2 * U")], 1).unwrap();
        let plan = EvalPlan::build(&lib);
        let mut g = Graph::new();
        let pts = array![[0.0, 0.5], [1.0, -2.0], [3.0, 4.0]];
        let x = g.leaf("X", pts.clone());
        let bound = linear_net().bind(&mut g, x).unwrap();
        let nodes = evaluate_terms(&mut g, x, bound.output, &plan, &lib).unwrap();
        let u = g.evaluate(nodes.rhs[0]).unwrap();
        let sq = g.evaluate(nodes.rhs[1]).unwrap();
        let ut = g.evaluate(nodes.lhs).unwrap();
        assert!(ut.iter().all(|&v| v == 0.0));
        for r in 0..3 {
            assert_eq!(u[[r, 0]], 2.0 * pts[[r, 1]]);
            assert_eq!(sq[[r, 0]], 8.0 * pts[[r, 1]]);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let lib = burgers();
        let plan = EvalPlan::build(&lib);
        let mut g = Graph::new();
        let x = g.leaf("X", Array2::zeros((2, 3)));
        let u = g.scalar(0.0);
        assert!(matches!(
            evaluate_terms(&mut g, x, u, &plan, &lib),
            Err(Error::Config(_))
        ));
    }

    /// Each Burgers term recomputed in a fresh graph by differentiating the
    /// network output directly, without any sharing.
    #[test]
    fn planned_terms_match_independent_recomputation() {
        let lib = burgers();
        let plan = EvalPlan::build(&lib);
        let mut net = Network::init(Architecture::new(2, 2, 8), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for act in &mut net.activations {
            act.numerator[1] += rng.random_range(-0.2..0.2);
        }
        let pts = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));

        let mut g = Graph::new();
        let x = g.leaf("X", pts.clone());
        let bound = net.bind(&mut g, x).unwrap();
        let nodes = evaluate_terms(&mut g, x, bound.output, &plan, &lib).unwrap();

        for (k, term) in lib.rhs.iter().enumerate() {
            let planned = g.evaluate(nodes.rhs[k]).unwrap();
            let mut h = Graph::new();
            let xi = h.leaf("X", pts.clone());
            let b = net.bind(&mut h, xi).unwrap();
            let mut value = Array2::<f64>::ones((5, 1));
            for &(op, p) in term.factors() {
                let mut d = b.output;
                for (axis, &order) in op.orders.iter().enumerate() {
                    for _ in 0..order {
                        let mut row = Array2::zeros((1, 2));
                        row[[0, axis]] = 1.0;
                        let e = h.constant(row);
                        d = h.differentiate_along(d, xi, e).unwrap();
                    }
                }
                let dv = h.evaluate(d).unwrap();
                value = value * dv.mapv(|v| v.powi(p as i32));
            }
            for r in 0..5 {
                let (a, b) = (planned[[r, 0]], value[[r, 0]]);
                assert!(
                    (a - b).abs() <= 1e-12 * b.abs().max(1e-300),
                    "{term} row {r}: {a} vs {b}"
                );
            }
        }
    }
}
