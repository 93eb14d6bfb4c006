//! Finite-state generators, invariant measures, detailed balance, relative
//! entropy and the Hamiltonian/Lagrangian pair of the empirical process.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::ops::Deref;

use crate::convex::{conjugate, ConjugateOptions, ConjugateResult, ConvexFunction};
use crate::error::{Error, Result};
use crate::util::dot;

/// Maximum row-sum deviation (relative to the off-diagonal row mass, floored
/// at 1) accepted before diagonals are recomputed.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Entries below this are treated as on the boundary by gradient-based code.
pub const INTERIOR_FLOOR: f64 = 1e-12;
/// Largest exponent difference accepted in `e^{xi_j - xi_i}`.
pub const EXP_LIMIT: f64 = 700.0;
/// Default detailed-balance tolerance, relative to `max_ij pi_i Q_ij`.
pub const BALANCE_TOL: f64 = 1e-9;

const SIMPLEX_SUM_TOL: f64 = 1e-12;

/// A validated Markov intensity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    q: DMatrix<f64>,
    labels: Vec<String>,
    edges: Vec<(usize, usize, f64)>,
}

#[derive(Serialize, Deserialize)]
struct GeneratorFile {
    #[serde(default)]
    labels: Option<Vec<String>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
}

impl GeneratorMatrix {
    /// Validates a row-major matrix and recomputes the diagonal so that rows
    /// sum to exactly zero.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let j = rows.len();
        let labels = (1..=j).map(|i| i.to_string()).collect();
        Self::with_labels(rows, labels)
    }

    pub fn with_labels(rows: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        let j = rows.len();
        if j < 2 {
            return Err(Error::InvalidGenerator(format!("need at least 2 states, got {j}")));
        }
        if labels.len() != j {
            return Err(Error::InvalidGenerator(format!(
                "{} labels for {j} states",
                labels.len()
            )));
        }
        let mut q = DMatrix::zeros(j, j);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != j {
                return Err(Error::InvalidGenerator(format!(
                    "row {i} has {} entries, expected {j}",
                    row.len()
                )));
            }
            let mut off = 0.0;
            for (k, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvalidGenerator(format!("Q[{i}][{k}] is not finite")));
                }
                if k != i {
                    if v < 0.0 {
                        return Err(Error::InvalidGenerator(format!(
                            "negative off-diagonal rate Q[{i}][{k}] = {v}"
                        )));
                    }
                    off += v;
                    q[(i, k)] = v;
                }
            }
            let deviation = (row[i] + off).abs();
            if deviation > ROW_SUM_TOL * off.max(1.0) {
                return Err(Error::InvalidGenerator(format!(
                    "row {i} sums to {:e}, expected 0",
                    row[i] + off
                )));
            }
            q[(i, i)] = -off;
        }
        let edges = (0..j)
            .flat_map(|i| (0..j).map(move |k| (i, k)))
            .filter(|&(i, k)| i != k && q[(i, k)] > 0.0)
            .map(|(i, k)| (i, k, q[(i, k)]))
            .collect();
        Ok(Self { q, labels, edges })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GeneratorFile = serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("generator JSON: {e}")))?;
        match file.labels {
            Some(labels) => Self::with_labels(file.q, labels),
            None => Self::new(file.q),
        }
    }

    pub fn to_json(&self) -> String {
        let file = GeneratorFile {
            labels: Some(self.labels.clone()),
            q: self.rows(),
        };
        serde_json::to_string_pretty(&file).expect("generator serializes")
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.q[(i, j)]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| self.q.row(i).iter().copied().collect())
            .collect()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Positive off-diagonal rates `(i, j, Q_ij)` in row-major order.
    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// `gamma = max_i sum_{j != i} Q_ij`.
    pub fn gamma(&self) -> f64 {
        (0..self.dim()).map(|i| -self.q[(i, i)]).fold(0.0, f64::max)
    }

    /// First pair with `Q_ij > 0` but `Q_ji = 0`, if any.
    pub fn weak_reversibility_violation(&self) -> Option<(usize, usize)> {
        self.edges
            .iter()
            .find(|&&(i, j, _)| self.q[(j, i)] <= 0.0)
            .map(|&(i, j, _)| (i, j))
    }

    pub fn is_weakly_reversible(&self) -> bool {
        self.weak_reversibility_violation().is_none()
    }

    /// `Q^T rho`.
    pub fn transpose_apply(&self, rho: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for &(i, j, r) in &self.edges {
            let flux = rho[i] * r;
            out[j] += flux;
            out[i] -= flux;
        }
        out
    }
}

/// A probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        if let Some((i, &v)) = entries.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("probability entry {i} = {v} is not a finite non-negative number")));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::invalid(format!("probability entries sum to {sum}, expected 1")));
        }
        Ok(Self(entries))
    }

    /// Divides a non-negative vector by its sum.
    pub fn normalized(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("cannot normalize: negative or non-finite entries"));
        }
        let sum: f64 = entries.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::invalid("cannot normalize a zero vector"));
        }
        Self::new(entries.iter().map(|v| v / sum).collect())
    }

    pub fn uniform(dim: usize) -> Self {
        Self(vec![1.0 / dim as f64; dim])
    }

    /// Point mass on `state`.
    pub fn vertex(dim: usize, state: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[state] = 1.0;
        Self(v)
    }

    pub fn is_interior(&self, floor: f64) -> bool {
        self.0.iter().all(|&v| v >= floor)
    }

    /// `BoundaryPoint` for the first entry below `floor`.
    pub fn require_interior(&self, floor: f64) -> Result<()> {
        match self.0.iter().enumerate().find(|(_, &v)| v < floor) {
            Some((state, &value)) => Err(Error::BoundaryPoint { state, value }),
            None => Ok(()),
        }
    }

    /// Raises entries to at least `floor` and renormalizes. This is an
    /// explicit modelling step; nothing in the library calls it implicitly.
    pub fn projected_to_interior(&self, floor: f64) -> Result<Self> {
        if !(floor > 0.0) || floor * self.0.len() as f64 >= 1.0 {
            return Err(Error::invalid(format!("interior floor {floor} is out of range")));
        }
        // Solve for the mixing weight so every entry reaches the floor exactly.
        let min = self.0.iter().cloned().fold(f64::INFINITY, f64::min);
        if min >= floor {
            return Ok(self.clone());
        }
        let uniform = 1.0 / self.0.len() as f64;
        let lambda = (floor - min) / (uniform - min);
        Self::normalized(self.0.iter().map(|v| (1.0 - lambda) * v + lambda * uniform).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for SimplexPoint {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub invariant_measure: SimplexPoint,
    pub is_irreducible: bool,
    pub detailed_balance: bool,
    /// `max_ij |pi_i Q_ij - pi_j Q_ji|`.
    pub max_violation: f64,
    /// Absolute tolerance the verdict was made with.
    pub tolerance: f64,
    pub weakly_reversible: bool,
}

/// Invariant measure and detailed-balance verdict.
///
/// `tol` is relative to `max_ij pi_i Q_ij`; `None` selects [`BALANCE_TOL`].
pub fn analyze_balance(q: &GeneratorMatrix, tol: Option<f64>) -> Result<BalanceReport> {
    let tol = tol.unwrap_or(BALANCE_TOL);
    if !(tol >= 0.0) {
        return Err(Error::invalid("balance tolerance must be non-negative"));
    }
    let j = q.dim();
    let classes = closed_classes(q);
    if classes.len() != 1 {
        return Err(Error::ReducibleChain { closed_classes: classes.len() });
    }
    let is_irreducible = classes[0].len() == j;

    // Q^T pi = 0 with the last equation replaced by sum(pi) = 1.
    let mut a = q.matrix().transpose();
    for k in 0..j {
        a[(j - 1, k)] = 1.0;
    }
    let mut rhs = DVector::zeros(j);
    rhs[j - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::ReducibleChain { closed_classes: classes.len() })?;
    let min_entry = pi.iter().cloned().fold(f64::INFINITY, f64::min);
    if !is_irreducible || !(min_entry > 0.0) {
        return Err(Error::DegenerateInvariantMeasure { min_entry: min_entry.min(0.0) });
    }
    let sum: f64 = pi.iter().sum();
    let pi: Vec<f64> = pi.iter().map(|v| v / sum).collect();

    let mut max_violation: f64 = 0.0;
    let mut max_flux: f64 = 0.0;
    for &(a, b, r) in q.edges() {
        max_flux = max_flux.max(pi[a] * r);
        max_violation = max_violation.max((pi[a] * r - pi[b] * q.rate(b, a)).abs());
    }
    let tolerance = tol * max_flux;
    Ok(BalanceReport {
        invariant_measure: SimplexPoint::new(pi)?,
        is_irreducible,
        detailed_balance: max_violation <= tolerance,
        max_violation,
        tolerance,
        weakly_reversible: q.is_weakly_reversible(),
    })
}

/// Closed communicating classes of the transition graph.
fn closed_classes(q: &GeneratorMatrix) -> Vec<Vec<usize>> {
    let j = q.dim();
    let mut reach = vec![vec![false; j]; j];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(a, b, _) in q.edges() {
        reach[a][b] = true;
    }
    for k in 0..j {
        for a in 0..j {
            if reach[a][k] {
                for b in 0..j {
                    if reach[k][b] {
                        reach[a][b] = true;
                    }
                }
            }
        }
    }
    let mut seen = vec![false; j];
    let mut closed = Vec::new();
    for a in 0..j {
        if seen[a] {
            continue;
        }
        let class: Vec<usize> = (0..j).filter(|&b| reach[a][b] && reach[b][a]).collect();
        for &b in &class {
            seen[b] = true;
        }
        let leaves = (0..j).any(|b| reach[a][b] && !reach[b][a]);
        if !leaves {
            closed.push(class);
        }
    }
    closed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeEntropy {
    pub value: f64,
    /// `log(rho_i / pi_i) + 1`.
    pub gradient_raw: Vec<f64>,
    /// Zero-sum representative of the gradient.
    pub gradient: Vec<f64>,
}

/// `E_pi(rho) = sum rho_i log(rho_i / pi_i)` with `0 log 0 = 0`.
pub fn relative_entropy(rho: &[f64], pi: &[f64]) -> Result<f64> {
    if rho.len() != pi.len() {
        return Err(Error::invalid("rho and pi have different lengths"));
    }
    let mut value = 0.0;
    for (state, (&r, &p)) in rho.iter().zip(pi).enumerate() {
        if r > 0.0 {
            if !(p > 0.0) {
                return Err(Error::InfiniteEntropy { state });
            }
            value += r * (r / p).ln();
        }
    }
    Ok(value)
}

/// Relative entropy with its gradient; refused on the boundary.
pub fn relative_entropy_with_gradient(rho: &[f64], pi: &[f64]) -> Result<RelativeEntropy> {
    let value = relative_entropy(rho, pi)?;
    if let Some((state, &value)) = rho.iter().enumerate().find(|(_, &v)| v < INTERIOR_FLOOR) {
        return Err(Error::BoundaryPoint { state, value });
    }
    let gradient_raw: Vec<f64> = rho.iter().zip(pi).map(|(r, p)| (r / p).ln() + 1.0).collect();
    let mean = gradient_raw.iter().sum::<f64>() / rho.len() as f64;
    let gradient = gradient_raw.iter().map(|g| g - mean).collect();
    Ok(RelativeEntropy { value, gradient_raw, gradient })
}

/// Convex function `xi -> sum_{(i,j)} w_ij (e^{xi_j - xi_i} - 1)` over a
/// weighted edge list. `H(rho, .)` has weights `rho_i Q_ij`; the LDP dual
/// dissipation potential has the same shape with tilted weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpEdgeSum {
    pub dim: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

impl ExpEdgeSum {
    fn exponent_check(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.dim {
            return Err(Error::invalid(format!("covector has length {}, expected {}", xi.len(), self.dim)));
        }
        for &(i, j, _) in &self.edges {
            let e = (xi[j] - xi[i]).abs();
            if !(e <= EXP_LIMIT) {
                return Err(Error::Overflow { exponent: e, limit: EXP_LIMIT });
            }
        }
        Ok(())
    }

    pub fn eval(&self, xi: &[f64]) -> Result<f64> {
        self.exponent_check(xi)?;
        Ok(self.raw_value(xi))
    }

    pub fn eval_gradient(&self, xi: &[f64]) -> Result<Vec<f64>> {
        self.exponent_check(xi)?;
        Ok(self.raw_gradient(xi))
    }

    fn raw_value(&self, xi: &[f64]) -> f64 {
        self.edges
            .iter()
            .map(|&(i, j, w)| w * (xi[j] - xi[i]).exp_m1())
            .sum()
    }

    fn raw_gradient(&self, xi: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for &(i, j, w) in &self.edges {
            let flux = w * (xi[j] - xi[i]).exp();
            g[j] += flux;
            g[i] -= flux;
        }
        g
    }

    fn raw_hessian(&self, xi: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for &(i, j, w) in &self.edges {
            let c = w * (xi[j] - xi[i]).exp();
            h[(i, i)] += c;
            h[(j, j)] += c;
            h[(i, j)] -= c;
            h[(j, i)] -= c;
        }
        h
    }
}

impl ConvexFunction for ExpEdgeSum {
    fn value(&self, xi: &[f64]) -> f64 {
        if self.exponent_check(xi).is_err() {
            return f64::INFINITY;
        }
        self.raw_value(xi)
    }
    fn gradient(&self, xi: &[f64]) -> Option<Vec<f64>> {
        Some(self.raw_gradient(xi))
    }
    fn hessian(&self, xi: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.raw_hessian(xi))
    }
}

/// `H(rho, .)` as a convex function of the covector.
pub fn hamiltonian_fn(rho: &[f64], q: &GeneratorMatrix) -> Result<ExpEdgeSum> {
    if rho.len() != q.dim() {
        return Err(Error::invalid(format!("rho has length {}, generator has {} states", rho.len(), q.dim())));
    }
    Ok(ExpEdgeSum {
        dim: q.dim(),
        edges: q
            .edges()
            .iter()
            .map(|&(i, j, r)| (i, j, rho[i] * r))
            .filter(|&(_, _, w)| w > 0.0)
            .collect(),
    })
}

/// `H(rho, xi) = sum_ij rho_i Q_ij (e^{xi_j - xi_i} - 1)`.
pub fn hamiltonian(rho: &[f64], xi: &[f64], q: &GeneratorMatrix) -> Result<f64> {
    hamiltonian_fn(rho, q)?.eval(xi)
}

/// `D_xi H(rho, xi)`.
pub fn hamiltonian_gradient(rho: &[f64], xi: &[f64], q: &GeneratorMatrix) -> Result<Vec<f64>> {
    hamiltonian_fn(rho, q)?.eval_gradient(xi)
}

/// `D_xi^2 H(rho, xi)`.
pub fn hamiltonian_hessian(rho: &[f64], xi: &[f64], q: &GeneratorMatrix) -> Result<DMatrix<f64>> {
    let h = hamiltonian_fn(rho, q)?;
    h.exponent_check(xi)?;
    Ok(h.raw_hessian(xi))
}

/// `L(rho, s) = sup_xi <xi, s> - H(rho, xi)`.
pub fn lagrangian(rho: &[f64], s: &[f64], q: &GeneratorMatrix) -> Result<ConjugateResult> {
    lagrangian_from(rho, s, q, None, &ConjugateOptions::default())
}

/// [`lagrangian`] with a warm start and explicit solver options.
pub fn lagrangian_from(
    rho: &[f64],
    s: &[f64],
    q: &GeneratorMatrix,
    x0: Option<&[f64]>,
    opts: &ConjugateOptions,
) -> Result<ConjugateResult> {
    let h = hamiltonian_fn(rho, q)?;
    if s.len() != q.dim() {
        return Err(Error::invalid("velocity and generator dimensions differ"));
    }
    let zeros = vec![0.0; q.dim()];
    let mut r = conjugate(&h, s, x0.unwrap_or(&zeros), opts)?;
    if r.value < 0.0 && r.value.abs() <= opts.tol {
        r.value = 0.0;
    }
    Ok(r)
}

/// `Q^T rho`.
pub fn drift(rho: &[f64], q: &GeneratorMatrix) -> Vec<f64> {
    q.transpose_apply(rho)
}

/// `<xi, s>`.
pub fn pairing(xi: &[f64], s: &[f64]) -> f64 {
    dot(xi, s)
}
