//! Grid discretization of the one-dimensional drift-diffusion
//! `Q phi = phi'' - P' phi'` and its quadratic Wasserstein-entropy structure.
//!
//! States are grid nodes and `rho` is a probability vector: node `i` carries
//! mass `rho_i`, i.e. density `rho_i / w_i` with trapezoid nodal masses
//! `w_i = h` (halved at the two ends). Covectors pair with mass rates
//! through the plain Euclidean product.

use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::markov::{GeneratorMatrix, SimplexPoint};
use crate::util::{dot, pairwise_sum};

/// Mobility below which an edge of the weighted stiffness counts as cut.
pub const MOBILITY_FLOOR: f64 = 1e-300;
/// Required agreement between the Thomas solve and the cumulative-flux solve.
pub const H_MINUS1_CROSS_CHECK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Potential {
    Zero,
    /// `P(x) = c x`.
    Linear { c: f64 },
    /// `P(x) = x^2 / 2`.
    Quadratic,
    /// Nodal values `P(x_i)`.
    Tabulated { values: Vec<f64> },
}

impl FromStr for Potential {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "zero" => Ok(Self::Zero),
            "quadratic" => Ok(Self::Quadratic),
            other => match other.strip_prefix("linear:") {
                Some(c) => c
                    .trim()
                    .parse()
                    .map(|c| Self::Linear { c })
                    .map_err(|_| Error::invalid(format!("bad linear slope in {other:?}"))),
                None => Err(Error::invalid(format!("unknown potential preset {other:?}"))),
            },
        }
    }
}

/// Serialized grid description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub a: f64,
    pub b: f64,
    #[serde(rename = "N")]
    pub n: usize,
    /// A preset name (`zero`, `linear:c`, `quadratic`) or a table of values.
    pub potential: PotentialSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PotentialSpec {
    Preset(String),
    Tabulated(Vec<f64>),
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid1D> {
        let potential = match &self.potential {
            PotentialSpec::Preset(name) => name.parse()?,
            PotentialSpec::Tabulated(values) => Potential::Tabulated { values: values.clone() },
        };
        Grid1D::new(self.a, self.b, self.n, potential)
    }
}

/// Uniform grid on `[a, b]` with no-flux ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub a: f64,
    pub b: f64,
    pub n: usize,
    pub h: f64,
    pub nodes: Vec<f64>,
    pub potential_kind: Potential,
    /// `P(x_i)`.
    pub potential: Vec<f64>,
    /// Centered differences of `P`, one-sided at the ends.
    pub force: Vec<f64>,
}

impl Grid1D {
    pub fn new(a: f64, b: f64, n: usize, potential: Potential) -> Result<Self> {
        if n < 3 {
            return Err(Error::GridMismatch(format!("need at least 3 nodes, got {n}")));
        }
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(Error::GridMismatch(format!("need finite a < b, got [{a}, {b}]")));
        }
        let h = (b - a) / (n - 1) as f64;
        let nodes: Vec<f64> = (0..n).map(|i| if i == n - 1 { b } else { a + i as f64 * h }).collect();
        let values: Vec<f64> = match &potential {
            Potential::Zero => vec![0.0; n],
            Potential::Linear { c } => nodes.iter().map(|x| c * x).collect(),
            Potential::Quadratic => nodes.iter().map(|x| 0.5 * x * x).collect(),
            Potential::Tabulated { values } => {
                if values.len() != n {
                    return Err(Error::GridMismatch(format!("{} potential values for {n} nodes", values.len())));
                }
                values.clone()
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::GridMismatch("potential has non-finite values".into()));
        }
        let force = (0..n)
            .map(|i| match i {
                0 => (values[1] - values[0]) / h,
                _ if i == n - 1 => (values[n - 1] - values[n - 2]) / h,
                _ => (values[i + 1] - values[i - 1]) / (2.0 * h),
            })
            .collect();
        Ok(Self { a, b, n, h, nodes, potential_kind: potential, potential: values, force })
    }

    /// Trapezoid nodal masses.
    pub fn masses(&self) -> Vec<f64> {
        (0..self.n).map(|i| if i == 0 || i == self.n - 1 { 0.5 * self.h } else { self.h }).collect()
    }

    /// `pi_i` proportional to `w_i e^{-P(x_i)}`: density proportional to `e^{-P}`.
    pub fn invariant_measure(&self) -> SimplexPoint {
        let pmin = self.potential.iter().cloned().fold(f64::INFINITY, f64::min);
        let u: Vec<f64> = self.potential.iter().map(|p| (pmin - p).exp()).collect();
        self.from_density(&u).expect("positive weights")
    }

    /// Mass of `N(0, 1)` outside `[a, b]`, for the quadratic preset.
    pub fn gaussian_tail_mass(&self) -> Option<f64> {
        (self.potential_kind == Potential::Quadratic).then(|| {
            let r = std::f64::consts::SQRT_2;
            0.5 * libm::erfc(self.b / r) + 0.5 * libm::erfc(-self.a / r)
        })
    }

    /// Densities `rho_i / w_i`.
    pub fn density(&self, rho: &[f64]) -> Vec<f64> {
        rho.iter().zip(self.masses()).map(|(r, w)| r / w).collect()
    }

    /// Probability vector from nodal density samples.
    pub fn from_density(&self, u: &[f64]) -> Result<SimplexPoint> {
        if u.len() != self.n {
            return Err(Error::GridMismatch(format!("{} values for {} nodes", u.len(), self.n)));
        }
        SimplexPoint::normalized(u.iter().zip(self.masses()).map(|(u, w)| u * w).collect())
    }
}

/// Nearest-neighbour chain with `Q_{i,i+-1} = e^{(P_i - P_{i+-1})/2} / (h w_i)`,
/// i.e. `1/h^2` scaling inside and doubled rates on the half cells at the
/// ends; reversible with respect to `pi_i` proportional to `w_i e^{-P_i}`.
pub fn discretize_generator(g: &Grid1D) -> Result<GeneratorMatrix> {
    let masses = g.masses();
    let mut rows = vec![vec![0.0; g.n]; g.n];
    for i in 0..g.n {
        let scale = 1.0 / (g.h * masses[i]);
        if i > 0 {
            rows[i][i - 1] = scale * (0.5 * (g.potential[i] - g.potential[i - 1])).exp();
        }
        if i + 1 < g.n {
            rows[i][i + 1] = scale * (0.5 * (g.potential[i] - g.potential[i + 1])).exp();
        }
        rows[i][i] = -rows[i].iter().sum::<f64>();
    }
    GeneratorMatrix::with_labels(rows, g.nodes.iter().map(|x| format!("{x}")).collect())
}

/// Edge coefficients `(u_i + u_{i+1}) / (2 h)` of the weighted stiffness,
/// with `u` the nodal density of `rho`.
pub fn stiffness_weights(rho: &[f64], g: &Grid1D) -> Result<Vec<f64>> {
    let u = g.density(rho);
    let c: Vec<f64> = u.windows(2).map(|w| 0.5 * (w[0] + w[1]) / g.h).collect();
    match c.iter().enumerate().find(|(_, &m)| !(m > MOBILITY_FLOOR)) {
        Some((edge, &mobility)) => Err(Error::DegenerateWeight { edge, mobility }),
        None => Ok(c),
    }
}

/// `(A(rho) xi)_i = -[c_{i+1/2}(xi_{i+1} - xi_i) - c_{i-1/2}(xi_i - xi_{i-1})]`.
pub fn apply_stiffness(c: &[f64], xi: &[f64]) -> Vec<f64> {
    let n = xi.len();
    let mut out = vec![0.0; n];
    for (e, &ce) in c.iter().enumerate() {
        let flux = ce * (xi[e + 1] - xi[e]);
        out[e] -= flux;
        out[e + 1] += flux;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HMinus1 {
    /// `<xi, s> = s^T A(rho)^+ s`.
    pub value: f64,
    /// Zero-mean solution of `A(rho) xi = s`.
    pub potential: Vec<f64>,
}

/// `||s||^2_{H^-1(rho)}` by a Thomas solve with `xi_0` pinned, cross-checked
/// against the cumulative-flux form `sum_e F_e^2 / c_e`.
pub fn h_minus1_norm_sq(rho: &[f64], s: &[f64], g: &Grid1D) -> Result<HMinus1> {
    if rho.len() != g.n || s.len() != g.n {
        return Err(Error::GridMismatch(format!("vectors must have length {}", g.n)));
    }
    let scale = s.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    if pairwise_sum(s).abs() > 1e-12 * scale {
        return Err(Error::invalid("s must sum to zero"));
    }
    let c = stiffness_weights(rho, g)?;
    let n = g.n;
    // Rows 1..n of A with xi_0 = 0: sub-diagonal -c_{i-1/2}, diagonal
    // c_{i-1/2} + c_{i+1/2}, super-diagonal -c_{i+1/2}.
    let m = n - 1;
    let diag: Vec<f64> = (1..n).map(|i| c[i - 1] + c.get(i).copied().unwrap_or(0.0)).collect();
    let off: Vec<f64> = (1..n - 1).map(|i| -c[i]).collect();
    let xi_tail = thomas(&off, &diag, &off, &s[1..])?;
    debug_assert_eq!(xi_tail.len(), m);
    let mut xi = Vec::with_capacity(n);
    xi.push(0.0);
    xi.extend(xi_tail);
    let mean = pairwise_sum(&xi) / n as f64;
    xi.iter_mut().for_each(|v| *v -= mean);
    let value = dot(&xi, s);

    let mut flux = 0.0;
    let terms: Vec<f64> = c
        .iter()
        .enumerate()
        .map(|(e, ce)| {
            flux -= s[e];
            flux * flux / ce
        })
        .collect();
    let alt = pairwise_sum(&terms);
    let tol = H_MINUS1_CROSS_CHECK_TOL * value.abs().max(alt.abs()).max(f64::MIN_POSITIVE);
    if (value - alt).abs() > tol && (value - alt).abs() > 1e-300 {
        return Err(Error::CrossCheckFailed {
            quantity: "H^-1 norm".into(),
            first: value,
            second: alt,
            tolerance: tol,
        });
    }
    Ok(HMinus1 { value: value.max(0.0), potential: xi })
}

/// Tridiagonal solve; `sub[k]` couples rows `k + 1` and `k`.
fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let m = diag.len();
    let mut cp = vec![0.0; m];
    let mut dp = vec![0.0; m];
    let mut denom = diag[0];
    for k in 0..m {
        if k > 0 {
            denom = diag[k] - sub[k - 1] * cp[k - 1];
        }
        if !(denom.abs() > 0.0) || !denom.is_finite() {
            return Err(Error::DegenerateWeight { edge: k, mobility: denom });
        }
        cp[k] = if k + 1 < m { sup[k] / denom } else { 0.0 };
        dp[k] = (rhs[k] - if k > 0 { sub[k - 1] * dp[k - 1] } else { 0.0 }) / denom;
    }
    let mut x = vec![0.0; m];
    x[m - 1] = dp[m - 1];
    for k in (0..m - 1).rev() {
        x[k] = dp[k] - cp[k] * x[k + 1];
    }
    Ok(x)
}

/// Decomposition of `L_h(rho, s) = ||s - flux_drift||^2_{H^-1} / 4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WassersteinDecomposition {
    pub lagrangian: f64,
    pub psi: f64,
    pub psi_star_at_minus_ds: f64,
    pub pairing: f64,
    pub residual: f64,
    /// `max(1, |L|, Psi, Psi*, |<DS, s>|)`, the size of the largest term.
    pub term_scale: f64,
}

impl WassersteinDecomposition {
    /// Residual relative to the largest term.
    pub fn relative_residual(&self) -> f64 {
        self.residual.abs() / self.term_scale
    }
}

/// Quadratic Wasserstein structure `Psi*(rho, xi) = xi^T A(rho) xi`,
/// `S = E_pi / 2`, on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WassersteinStructure {
    pub grid: Grid1D,
    pub pi: SimplexPoint,
}

impl WassersteinStructure {
    pub fn new(grid: Grid1D) -> Self {
        let pi = grid.invariant_measure();
        Self { grid, pi }
    }

    fn check(&self, rho: &[f64]) -> Result<()> {
        if rho.len() != self.grid.n {
            return Err(Error::GridMismatch(format!("rho has length {}, expected {}", rho.len(), self.grid.n)));
        }
        match rho.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            Some((state, &value)) => Err(Error::BoundaryPoint { state, value }),
            None => Ok(()),
        }
    }

    pub fn psi_star(&self, rho: &[f64], xi: &[f64]) -> Result<f64> {
        self.check(rho)?;
        let c = stiffness_weights(rho, &self.grid)?;
        let terms: Vec<f64> = c.iter().enumerate().map(|(e, ce)| ce * (xi[e + 1] - xi[e]).powi(2)).collect();
        Ok(pairwise_sum(&terms))
    }

    /// `||s||^2_{H^-1(rho)} / 4`.
    pub fn psi(&self, rho: &[f64], s: &[f64]) -> Result<f64> {
        self.check(rho)?;
        Ok(0.25 * h_minus1_norm_sq(rho, s, &self.grid)?.value)
    }

    /// `S(rho) = E_pi(rho) / 2`.
    pub fn entropy(&self, rho: &[f64]) -> Result<f64> {
        self.check(rho)?;
        Ok(0.5 * crate::markov::relative_entropy(rho, &self.pi)?)
    }

    /// `DS_i = (log(rho_i / pi_i) + 1) / 2`.
    pub fn entropy_gradient(&self, rho: &[f64]) -> Result<Vec<f64>> {
        self.check(rho)?;
        Ok(rho.iter().zip(self.pi.iter()).map(|(r, p)| 0.5 * ((r / p).ln() + 1.0)).collect())
    }

    /// `-2 A(rho) DS(rho)`, the discrete `u'' + (P' u)'`.
    pub fn flux_drift(&self, rho: &[f64]) -> Result<Vec<f64>> {
        let ds = self.entropy_gradient(rho)?;
        let c = stiffness_weights(rho, &self.grid)?;
        Ok(apply_stiffness(&c, &ds).into_iter().map(|v| -2.0 * v).collect())
    }

    pub fn lagrangian(&self, rho: &[f64], s: &[f64]) -> Result<f64> {
        let f = self.flux_drift(rho)?;
        let d: Vec<f64> = s.iter().zip(&f).map(|(a, b)| a - b).collect();
        self.psi(rho, &d)
    }

    pub fn decompose(&self, rho: &[f64], s: &[f64]) -> Result<WassersteinDecomposition> {
        let lagrangian = self.lagrangian(rho, s)?;
        let psi = self.psi(rho, s)?;
        let ds = self.entropy_gradient(rho)?;
        let minus: Vec<f64> = ds.iter().map(|v| -v).collect();
        let psi_star_at_minus_ds = self.psi_star(rho, &minus)?;
        let pairing = dot(&ds, s);
        Ok(WassersteinDecomposition {
            lagrangian,
            psi,
            psi_star_at_minus_ds,
            pairing,
            residual: lagrangian - (psi + psi_star_at_minus_ds + pairing),
            term_scale: lagrangian.abs().max(psi).max(psi_star_at_minus_ds).max(pairing.abs()).max(1.0),
        })
    }

    /// CSV `x,rho,pi,DS` with nodal densities for `rho` and `pi`.
    pub fn profile_csv(&self, rho: &[f64]) -> Result<String> {
        let ds = self.entropy_gradient(rho)?;
        let u = self.grid.density(rho);
        let p = self.grid.density(&self.pi);
        let mut out = String::from("x,rho,pi,DS\n");
        for i in 0..self.grid.n {
            out.push_str(&format!("{},{},{},{}\n", self.grid.nodes[i], u[i], p[i], ds[i]));
        }
        Ok(out)
    }
}

/// Largest absolute deviation of `(Q phi)_i` from `phi'' - P' phi'` over
/// interior nodes.
pub fn consistency_error(g: &Grid1D, q: &GeneratorMatrix, phi: impl Fn(f64) -> f64, target: impl Fn(f64) -> f64) -> f64 {
    let values: Vec<f64> = g.nodes.iter().map(|&x| phi(x)).collect();
    (1..g.n - 1)
        .map(|i| {
            let qphi = q.rate(i, i - 1) * (values[i - 1] - values[i]) + q.rate(i, i + 1) * (values[i + 1] - values[i]);
            (qphi - target(g.nodes[i])).abs()
        })
        .fold(0.0, f64::max)
}

/// Entropy-curve comparison between a grid and its refinement with `2N - 1`
/// nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub h_coarse: f64,
    pub horizon: f64,
    /// `max_t |S_N(t) - S_{2N-1}(t)|` over the sample times.
    pub sup_gap: f64,
    /// `sup_gap / h_coarse^2`.
    pub fitted_constant: f64,
}

/// Exact-in-time entropy curves `S(t) = E_pi(rho_t) / 2` on `g` and on its
/// refinement, both started from nodal samples of `density`.
pub fn entropy_refinement(g: &Grid1D, density: impl Fn(f64) -> f64, horizon: f64, samples: usize) -> Result<RefinementReport> {
    if matches!(g.potential_kind, Potential::Tabulated { .. }) {
        return Err(Error::GridMismatch("tabulated potentials cannot be refined".into()));
    }
    if samples < 2 || !(horizon > 0.0) {
        return Err(Error::invalid("need at least two sample times and a positive horizon"));
    }
    let fine = Grid1D::new(g.a, g.b, 2 * g.n - 1, g.potential_kind.clone())?;
    let times: Vec<f64> = (0..samples).map(|k| horizon * k as f64 / (samples - 1) as f64).collect();
    let curve = |grid: &Grid1D| -> Result<Vec<f64>> {
        let u: Vec<f64> = grid.nodes.iter().map(|&x| density(x)).collect();
        let rho0 = grid.from_density(&u)?;
        let q = discretize_generator(grid)?;
        let pi = grid.invariant_measure();
        crate::evolution::exact_trajectory(&rho0, &q, &times)?
            .iter()
            .map(|rho| {
                let clipped: Vec<f64> = rho.iter().map(|v| v.max(0.0)).collect();
                Ok(0.5 * crate::markov::relative_entropy(&SimplexPoint::normalized(clipped)?, &pi)?)
            })
            .collect()
    };
    let a = curve(g)?;
    let b = curve(&fine)?;
    let sup_gap = crate::util::max_abs_diff(&a, &b);
    Ok(RefinementReport {
        n_coarse: g.n,
        n_fine: fine.n,
        h_coarse: g.h,
        horizon,
        sup_gap,
        fitted_constant: sup_gap / (g.h * g.h),
    })
}
