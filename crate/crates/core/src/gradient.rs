//! Gradient structures `(Psi, Psi*, S)` induced by a Markov generator.
//!
//! The LDP structure takes `Psi*(rho, xi) = H(rho, V + xi) - H(rho, V)` with
//! `V = argmin H(rho, .)`. Dissipation families replace it by
//! `sum_{i != j} L_ij(rho) psi(xi_j - xi_i)` with edge mobilities
//! `L_ij = pi_i Q_ij (r_j - r_i) / psi'(log r_j - log r_i)`, `r = rho / pi`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::convex::{conjugate, ConjugateOptions, ConvexFunction, CotangentVector, TangentVector};
use crate::error::{Error, Result};
use crate::markov::{
    analyze_balance, drift, hamiltonian, hamiltonian_fn, lagrangian, relative_entropy, BalanceReport, ExpEdgeSum,
    GeneratorMatrix, SimplexPoint, INTERIOR_FLOOR,
};
use crate::sampling::{random_interior_point, random_zero_sum, stream_rng, SAMPLE_FLOOR};
use crate::util::{dot, max_abs_diff, norm_inf};

/// Verdict threshold for "defect is zero".
pub const DIAGNOSTIC_TOL: f64 = 1e-6;
/// Agreement required between the two routes to `Psi` in the LDP structure.
pub const PSI_CROSS_CHECK_TOL: f64 = 1e-7;
/// Below this `|log r_j - log r_i|` the mobility uses its continuous limit.
pub const MOBILITY_GUARD: f64 = 1e-8;
/// Tolerance for accepting an entropy normalization of a family.
pub const NORMALIZATION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DissipationFamily {
    LdpExact,
    CoshFamily,
    QuadraticFamily,
}

impl fmt::Display for DissipationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LdpExact => "ldp",
            Self::CoshFamily => "cosh_family",
            Self::QuadraticFamily => "quadratic_family",
        })
    }
}

impl FromStr for DissipationFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ldp" | "LDP_EXACT" => Ok(Self::LdpExact),
            "cosh_family" | "COSH_FAMILY" => Ok(Self::CoshFamily),
            "quadratic_family" | "QUADRATIC_FAMILY" => Ok(Self::QuadraticFamily),
            other => Err(Error::invalid(format!("unknown structure tag '{other}'"))),
        }
    }
}

/// A generator together with an invariant measure, an entropy scale and a
/// choice of dissipation.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStructure {
    pub pi: SimplexPoint,
    pub entropy_scale: f64,
    pub family: DissipationFamily,
    pub generator: GeneratorMatrix,
    pub balance: BalanceReport,
}

impl GradientStructure {
    /// The structure obtained from the large-deviation rate, `S = E_pi / 2`.
    pub fn ldp(q: &GeneratorMatrix) -> Result<Self> {
        Self::new(q, DissipationFamily::LdpExact, 0.5)
    }

    pub fn new(q: &GeneratorMatrix, family: DissipationFamily, entropy_scale: f64) -> Result<Self> {
        if !(entropy_scale > 0.0) || !entropy_scale.is_finite() {
            return Err(Error::invalid(format!("entropy scale must be positive, got {entropy_scale}")));
        }
        if family != DissipationFamily::LdpExact {
            if let Some((i, j)) = q.weak_reversibility_violation() {
                return Err(Error::NotWeaklyReversible { i, j });
            }
        }
        let balance = analyze_balance(q, None)?;
        Ok(Self {
            pi: balance.invariant_measure.clone(),
            entropy_scale,
            family,
            generator: q.clone(),
            balance,
        })
    }

    pub fn dim(&self) -> usize {
        self.pi.len()
    }

    /// `S(rho) = entropy_scale * E_pi(rho)`.
    pub fn entropy(&self, rho: &[f64]) -> Result<f64> {
        Ok(self.entropy_scale * relative_entropy(rho, &self.pi)?)
    }

    /// `DS(rho) = entropy_scale * (log(rho / pi) + 1)`.
    pub fn entropy_gradient(&self, rho: &[f64]) -> Result<Vec<f64>> {
        self.check_point(rho)?;
        Ok(rho
            .iter()
            .zip(self.pi.iter())
            .map(|(r, p)| self.entropy_scale * ((r / p).ln() + 1.0))
            .collect())
    }

    fn check_point(&self, rho: &[f64]) -> Result<()> {
        if rho.len() != self.dim() {
            return Err(Error::invalid(format!("rho has length {}, expected {}", rho.len(), self.dim())));
        }
        match rho.iter().enumerate().find(|(_, &v)| !(v >= INTERIOR_FLOOR)) {
            Some((state, &value)) => Err(Error::BoundaryPoint { state, value }),
            None => Ok(()),
        }
    }

    /// `Psi*(rho, .)` as a convex function with closed-form derivatives.
    pub fn dual_potential(&self, rho: &[f64]) -> Result<DualPotential> {
        self.check_point(rho)?;
        let q = &self.generator;
        match self.family {
            DissipationFamily::LdpExact => {
                let edges = if self.balance.detailed_balance {
                    q.edges()
                        .iter()
                        .map(|&(i, j, r)| (i, j, (rho[i] * rho[j] * self.pi[i] / self.pi[j]).sqrt() * r))
                        .collect()
                } else {
                    let v = critical_covector(rho, q)?;
                    tilted_weights(rho, q, &v)
                };
                Ok(DualPotential::Exp(ExpEdgeSum { dim: self.dim(), edges }))
            }
            DissipationFamily::CoshFamily | DissipationFamily::QuadraticFamily => {
                let kernel = if self.family == DissipationFamily::CoshFamily {
                    Kernel::Cosh
                } else {
                    Kernel::Quadratic
                };
                let edges = q
                    .edges()
                    .iter()
                    .map(|&(i, j, r)| (i, j, family_mobility(kernel, self.pi[i] * r, rho[i] / self.pi[i], rho[j] / self.pi[j])))
                    .collect();
                Ok(DualPotential::Family(FamilyDual { dim: self.dim(), edges, kernel }))
            }
        }
    }
}

/// Weights `rho_i Q_ij e^{V_j - V_i}` of `xi -> H(rho, V + xi) - H(rho, V)`.
fn tilted_weights(rho: &[f64], q: &GeneratorMatrix, v: &[f64]) -> Vec<(usize, usize, f64)> {
    q.edges()
        .iter()
        .map(|&(i, j, r)| (i, j, rho[i] * r * (v[j] - v[i]).exp()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// `psi(z) = cosh z - 1`.
    Cosh,
    /// `psi(z) = z^2 / 2`.
    Quadratic,
}

impl Kernel {
    fn psi(self, z: f64) -> f64 {
        match self {
            Kernel::Cosh => z.cosh() - 1.0,
            Kernel::Quadratic => 0.5 * z * z,
        }
    }
    fn d1(self, z: f64) -> f64 {
        match self {
            Kernel::Cosh => z.sinh(),
            Kernel::Quadratic => z,
        }
    }
    fn d2(self, z: f64) -> f64 {
        match self {
            Kernel::Cosh => z.cosh(),
            Kernel::Quadratic => 1.0,
        }
    }
}

/// `L_ij = k (r_j - r_i) / psi'(log r_j - log r_i)` with `k = pi_i Q_ij`.
pub fn family_mobility(kernel: Kernel, k: f64, ri: f64, rj: f64) -> f64 {
    match kernel {
        // sinh(log rj - log ri) = (rj^2 - ri^2) / (2 ri rj): no singularity.
        Kernel::Cosh => k * 2.0 * ri * rj / (ri + rj),
        Kernel::Quadratic => {
            let dl = rj.ln() - ri.ln();
            if dl.abs() < MOBILITY_GUARD {
                k * (ri * rj).sqrt()
            } else {
                k * (rj - ri) / dl
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyDual {
    pub dim: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub kernel: Kernel,
}

impl ConvexFunction for FamilyDual {
    fn value(&self, xi: &[f64]) -> f64 {
        self.edges
            .iter()
            .map(|&(i, j, l)| l * self.kernel.psi(xi[j] - xi[i]))
            .sum()
    }
    fn gradient(&self, xi: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![0.0; self.dim];
        for &(i, j, l) in &self.edges {
            let d = l * self.kernel.d1(xi[j] - xi[i]);
            g[j] += d;
            g[i] -= d;
        }
        Some(g)
    }
    fn hessian(&self, xi: &[f64]) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for &(i, j, l) in &self.edges {
            let c = l * self.kernel.d2(xi[j] - xi[i]);
            h[(i, i)] += c;
            h[(j, j)] += c;
            h[(i, j)] -= c;
            h[(j, i)] -= c;
        }
        Some(h)
    }
}

/// `Psi*(rho, .)` of a structure.
#[derive(Debug, Clone, PartialEq)]
pub enum DualPotential {
    Exp(ExpEdgeSum),
    Family(FamilyDual),
}

impl ConvexFunction for DualPotential {
    fn value(&self, xi: &[f64]) -> f64 {
        match self {
            Self::Exp(f) => f.value(xi),
            Self::Family(f) => f.value(xi),
        }
    }
    fn gradient(&self, xi: &[f64]) -> Option<Vec<f64>> {
        match self {
            Self::Exp(f) => f.gradient(xi),
            Self::Family(f) => f.gradient(xi),
        }
    }
    fn hessian(&self, xi: &[f64]) -> Option<DMatrix<f64>> {
        match self {
            Self::Exp(f) => f.hessian(xi),
            Self::Family(f) => f.hessian(xi),
        }
    }
}

impl DualPotential {
    fn checked_value(&self, xi: &[f64]) -> Result<f64> {
        match self {
            Self::Exp(f) => f.eval(xi),
            Self::Family(f) => {
                if xi.len() != f.dim {
                    return Err(Error::invalid("covector dimension mismatch"));
                }
                let v = f.value(xi);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Overflow { exponent: norm_inf(xi), limit: crate::markov::EXP_LIMIT })
                }
            }
        }
    }
}

/// `V_L(rho) = argmin_xi H(rho, xi)`, as its zero-sum representative.
pub fn critical_covector(rho: &[f64], q: &GeneratorMatrix) -> Result<CotangentVector> {
    critical_covector_from(rho, q, None)
}

/// [`critical_covector`] with a warm start.
pub fn critical_covector_from(rho: &[f64], q: &GeneratorMatrix, x0: Option<&[f64]>) -> Result<CotangentVector> {
    if let Some((state, &value)) = rho.iter().enumerate().find(|(_, &v)| !(v >= INTERIOR_FLOOR)) {
        return Err(Error::BoundaryPoint { state, value });
    }
    let h = hamiltonian_fn(rho, q)?;
    let zeros = vec![0.0; q.dim()];
    let r = conjugate(&h, &zeros, x0.unwrap_or(&zeros), &ConjugateOptions::default())?;
    CotangentVector::new(r.argmax)
}

/// `Psi*(rho, xi)` of the structure.
pub fn psi_star(gs: &GradientStructure, rho: &[f64], xi: &[f64]) -> Result<f64> {
    gs.dual_potential(rho)?.checked_value(xi)
}

/// `H(rho, v + xi) - H(rho, v)` for an arbitrary covector `v`.
pub fn psi_star_with_covector(rho: &[f64], xi: &[f64], q: &GeneratorMatrix, v: &[f64]) -> Result<f64> {
    let shifted: Vec<f64> = v.iter().zip(xi).map(|(a, b)| a + b).collect();
    Ok(hamiltonian(rho, &shifted, q)? - hamiltonian(rho, v, q)?)
}

/// `Psi(rho, s)`. For the LDP structure this is `L(s) - L(0) - <V, s>`,
/// cross-checked against the conjugate of `Psi*` when `cross_check` is set.
pub fn psi(gs: &GradientStructure, rho: &[f64], s: &[f64]) -> Result<f64> {
    psi_with(gs, rho, s, true)
}

pub fn psi_with(gs: &GradientStructure, rho: &[f64], s: &[f64], cross_check: bool) -> Result<f64> {
    let s = TangentVector::new(s.to_vec())?;
    let dual = gs.dual_potential(rho)?;
    let via_dual = || -> Result<f64> {
        let zeros = vec![0.0; s.len()];
        Ok(conjugate(&dual, &s, &zeros, &ConjugateOptions::default())?.value)
    };
    match gs.family {
        DissipationFamily::LdpExact => {
            let q = &gs.generator;
            let l0 = lagrangian(rho, &vec![0.0; s.len()], q)?;
            let ls = lagrangian(rho, &s, q)?;
            let value = ls.value - l0.value - dot(&l0.argmax, &s);
            if cross_check {
                let other = via_dual()?;
                if (value - other).abs() > PSI_CROSS_CHECK_TOL {
                    return Err(Error::CrossCheckFailed {
                        quantity: "Psi".into(),
                        first: value,
                        second: other,
                        tolerance: PSI_CROSS_CHECK_TOL,
                    });
                }
            }
            Ok(value)
        }
        _ => via_dual(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub lagrangian: f64,
    pub psi: f64,
    /// `Psi*(rho, -V)`.
    pub psi_star_at_minus_v: f64,
    /// `<V, s>`.
    pub pairing: f64,
    /// `L - (Psi + Psi*(-V) + <V, s>)`.
    pub residual: f64,
    /// The covector `V` used: `V_L` for the LDP structure, `DS` for families.
    pub covector: Vec<f64>,
    /// False when detailed balance fails: then only the covector reading holds.
    pub gradient_system: bool,
}

/// Splits `L(rho, s)` into `Psi(rho, s) + Psi*(rho, -V) + <V, s>`.
///
/// `L` comes from the Markov Hamiltonian, `Psi` from a numerical conjugate of
/// `Psi*`, so the residual checks the two independently.
pub fn decompose(gs: &GradientStructure, rho: &[f64], s: &[f64]) -> Result<Decomposition> {
    let s = TangentVector::new(s.to_vec())?;
    let q = &gs.generator;
    let l = lagrangian(rho, &s, q)?;
    let v: Vec<f64> = match gs.family {
        DissipationFamily::LdpExact => critical_covector(rho, q)?.into_inner(),
        _ => gs.entropy_gradient(rho)?,
    };
    let dual = match gs.family {
        DissipationFamily::LdpExact => DualPotential::Exp(ExpEdgeSum { dim: gs.dim(), edges: tilted_weights(rho, q, &v) }),
        _ => gs.dual_potential(rho)?,
    };
    let zeros = vec![0.0; s.len()];
    let psi = conjugate(&dual, &s, &zeros, &ConjugateOptions::default())?.value;
    let minus_v: Vec<f64> = v.iter().map(|x| -x).collect();
    let psi_star_at_minus_v = dual.checked_value(&minus_v)?;
    let pairing = dot(&v, &s);
    Ok(Decomposition {
        lagrangian: l.value,
        psi,
        psi_star_at_minus_v,
        pairing,
        residual: l.value - (psi + psi_star_at_minus_v + pairing),
        covector: v,
        gradient_system: gs.balance.detailed_balance,
    })
}

/// `D_xi Psi*(rho, -DS(rho))`.
pub fn flow_field(gs: &GradientStructure, rho: &[f64]) -> Result<TangentVector> {
    if gs.family == DissipationFamily::LdpExact && !gs.balance.detailed_balance {
        return Err(Error::NotGradientSystem { max_violation: gs.balance.max_violation });
    }
    let dual = gs.dual_potential(rho)?;
    let ds = gs.entropy_gradient(rho)?;
    let minus: Vec<f64> = ds.iter().map(|x| -x).collect();
    let g = dual.gradient(&minus).expect("closed-form gradient");
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow { exponent: norm_inf(&minus), limit: crate::markov::EXP_LIMIT });
    }
    TangentVector::new(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticOptions {
    pub sample_count: usize,
    pub seed: u64,
    /// Number of random triangles for the loop-integral test.
    pub loops: usize,
    pub segments_per_edge: usize,
    /// Interior floor of the triangle vertices.
    pub loop_floor: f64,
    pub tolerance: f64,
}

impl DiagnosticOptions {
    pub fn new(sample_count: usize, seed: u64) -> Self {
        Self {
            sample_count,
            seed,
            loops: 4,
            segments_per_edge: 100,
            loop_floor: 0.02,
            tolerance: DIAGNOSTIC_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub sample: usize,
    pub rho: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureDiagnostics {
    pub options: DiagnosticOptions,
    pub balance: BalanceReport,
    pub decomposition_residual_max: f64,
    pub psi_star_symmetry_defect: f64,
    pub time_symmetry_defect_max: f64,
    pub integrability_defect: f64,
    /// Secondary check: asymmetry of the finite-difference Jacobian of `V_L`
    /// in tangent coordinates.
    pub jacobian_asymmetry: f64,
    /// `max |V_L - project_zero_sum(DE_pi) / 2|_inf` over the samples.
    pub half_entropy_gap: f64,
    pub critical_covector_is_half_entropy_gradient: bool,
    /// All defects within tolerance.
    pub gradient_system: bool,
    pub worst_decomposition: WorstCase,
    pub worst_time_symmetry: WorstCase,
    pub worst_psi_star_symmetry: WorstCase,
    pub worst_loop: WorstCase,
}

struct SampleOutcome {
    rho: Vec<f64>,
    decomposition: f64,
    time_symmetry: f64,
    psi_star_symmetry: f64,
    half_entropy: f64,
    jacobian: f64,
}

/// Time-symmetry, Psi*-symmetry, integrability and decomposition defects
/// over seeded random samples.
pub fn diagnostics(q: &GeneratorMatrix, sample_count: usize, seed: u64) -> Result<StructureDiagnostics> {
    diagnostics_with(q, &DiagnosticOptions::new(sample_count, seed))
}

pub fn diagnostics_with(q: &GeneratorMatrix, opts: &DiagnosticOptions) -> Result<StructureDiagnostics> {
    if opts.sample_count == 0 {
        return Err(Error::invalid("sample_count must be at least 1"));
    }
    let gs = GradientStructure::ldp(q)?;
    let dim = q.dim();
    let samples: Vec<Result<SampleOutcome>> = (0..opts.sample_count)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(opts.seed, k as u64);
            let rho = random_interior_point(&mut rng, dim, SAMPLE_FLOOR)?;
            let s = random_zero_sum(&mut rng, dim, 0.5);
            let xi = random_zero_sum(&mut rng, dim, 1.0);
            sample_defects(&gs, &rho, &s, &xi)
        })
        .collect();
    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;

    let loops: Vec<Result<(Vec<f64>, f64)>> = (0..opts.loops)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(opts.seed, (opts.sample_count + k) as u64);
            let vertices = (0..3)
                .map(|_| random_interior_point(&mut rng, dim, opts.loop_floor).map(SimplexPoint::into_inner))
                .collect::<Result<Vec<_>>>()?;
            let value = loop_integral(q, &vertices, opts.segments_per_edge)?;
            Ok((vertices[0].clone(), value.abs()))
        })
        .collect();
    let loops = loops.into_iter().collect::<Result<Vec<_>>>()?;

    let worst = |f: &dyn Fn(&SampleOutcome) -> f64| -> WorstCase {
        let (k, best) = samples
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, o)| if f(o) > acc.1 { (k, f(o)) } else { acc });
        WorstCase { sample: k, rho: samples[k].rho.clone(), value: best }
    };
    let worst_decomposition = worst(&|o| o.decomposition);
    let worst_time_symmetry = worst(&|o| o.time_symmetry);
    let worst_psi_star_symmetry = worst(&|o| o.psi_star_symmetry);
    let half_entropy_gap = worst(&|o| o.half_entropy).value;
    let jacobian_asymmetry = worst(&|o| o.jacobian).value;
    let worst_loop = loops
        .iter()
        .enumerate()
        .fold(WorstCase { sample: 0, rho: loops[0].0.clone(), value: f64::NEG_INFINITY }, |acc, (k, (rho, v))| {
            if *v > acc.value {
                WorstCase { sample: k, rho: rho.clone(), value: *v }
            } else {
                acc
            }
        });
    let tol = opts.tolerance;
    let flag = half_entropy_gap <= tol;
    let gradient_system = worst_time_symmetry.value <= tol
        && worst_psi_star_symmetry.value <= tol
        && worst_loop.value <= tol
        && flag;
    Ok(StructureDiagnostics {
        options: opts.clone(),
        balance: gs.balance.clone(),
        decomposition_residual_max: worst_decomposition.value,
        psi_star_symmetry_defect: worst_psi_star_symmetry.value,
        time_symmetry_defect_max: worst_time_symmetry.value,
        integrability_defect: worst_loop.value,
        jacobian_asymmetry,
        half_entropy_gap,
        critical_covector_is_half_entropy_gradient: flag,
        gradient_system,
        worst_decomposition,
        worst_time_symmetry,
        worst_psi_star_symmetry,
        worst_loop,
    })
}

fn sample_defects(gs: &GradientStructure, rho: &[f64], s: &[f64], xi: &[f64]) -> Result<SampleOutcome> {
    let q = &gs.generator;
    let v = critical_covector(rho, q)?;
    let minus_s: Vec<f64> = s.iter().map(|x| -x).collect();
    let l_plus = lagrangian(rho, s, q)?.value;
    let l_minus = lagrangian(rho, &minus_s, q)?.value;
    let time_symmetry = (l_plus - l_minus - 2.0 * dot(&v, s)).abs();

    let vp: Vec<f64> = v.iter().zip(xi).map(|(a, b)| a + b).collect();
    let vm: Vec<f64> = v.iter().zip(xi).map(|(a, b)| a - b).collect();
    let psi_star_symmetry = (hamiltonian(rho, &vm, q)? - hamiltonian(rho, &vp, q)?).abs();

    let decomposition = decompose(gs, rho, s)?.residual.abs();

    let half: Vec<f64> = {
        let raw: Vec<f64> = rho.iter().zip(gs.pi.iter()).map(|(r, p)| 0.5 * (r / p).ln()).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        raw.iter().map(|x| x - mean).collect()
    };
    let half_entropy = max_abs_diff(&v, &half);
    let jacobian = jacobian_asymmetry(rho, q, &v)?;
    Ok(SampleOutcome {
        rho: rho.to_vec(),
        decomposition,
        time_symmetry,
        psi_star_symmetry,
        half_entropy,
        jacobian,
    })
}

/// Max asymmetry of `T_ab = <e_a - e_J, DV (e_b - e_J)>`, central differences.
fn jacobian_asymmetry(rho: &[f64], q: &GeneratorMatrix, v: &[f64]) -> Result<f64> {
    let dim = rho.len();
    let min = rho.iter().cloned().fold(f64::INFINITY, f64::min);
    let h = 1e-5 * min.min(1.0);
    let mut t = vec![vec![0.0; dim - 1]; dim - 1];
    for b in 0..dim - 1 {
        let mut plus = rho.to_vec();
        let mut minus = rho.to_vec();
        plus[b] += h;
        plus[dim - 1] -= h;
        minus[b] -= h;
        minus[dim - 1] += h;
        let vp = critical_covector_from(&plus, q, Some(v))?;
        let vm = critical_covector_from(&minus, q, Some(v))?;
        for (a, row) in t.iter_mut().enumerate() {
            row[b] = ((vp[a] - vp[dim - 1]) - (vm[a] - vm[dim - 1])) / (2.0 * h);
        }
    }
    let mut asym: f64 = 0.0;
    for a in 0..dim - 1 {
        for b in 0..a {
            asym = asym.max((t[a][b] - t[b][a]).abs());
        }
    }
    Ok(asym)
}

const GL3_NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GL3_WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

/// `oint <V_L(rho), d rho>` around the closed polygon through `vertices`,
/// three-point Gauss-Legendre per segment.
pub fn loop_integral(q: &GeneratorMatrix, vertices: &[Vec<f64>], segments_per_edge: usize) -> Result<f64> {
    if vertices.len() < 2 || segments_per_edge == 0 {
        return Err(Error::invalid("loop needs at least two vertices and one segment per edge"));
    }
    let mut total = 0.0;
    let mut warm: Option<Vec<f64>> = None;
    for (e, a) in vertices.iter().enumerate() {
        let b = &vertices[(e + 1) % vertices.len()];
        let d: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
        let len = 1.0 / segments_per_edge as f64;
        for seg in 0..segments_per_edge {
            let mid = (seg as f64 + 0.5) * len;
            for (node, w) in GL3_NODES.iter().zip(GL3_WEIGHTS) {
                let t = mid + 0.5 * len * node;
                let rho: Vec<f64> = a.iter().zip(&d).map(|(x, y)| x + t * y).collect();
                let v = critical_covector_from(&rho, q, warm.as_deref())?;
                total += 0.5 * len * w * dot(&v, &d);
                warm = Some(v.into_inner());
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationCandidate {
    pub entropy_scale: f64,
    /// `max |flow_field - Q^T rho|_inf` over the samples.
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub family: DissipationFamily,
    pub seed: u64,
    pub samples: usize,
    pub tolerance: f64,
    pub candidates: Vec<NormalizationCandidate>,
    /// The first candidate within tolerance, if any.
    pub selected: Option<f64>,
    /// Candidate with the smallest deviation.
    pub best: f64,
}

/// Determines which entropy scale makes the family flow equal `Q^T rho`.
pub fn family_normalization(
    q: &GeneratorMatrix,
    family: DissipationFamily,
    candidates: &[f64],
    samples: usize,
    seed: u64,
) -> Result<NormalizationReport> {
    if candidates.is_empty() || samples == 0 {
        return Err(Error::invalid("need at least one candidate and one sample"));
    }
    let points = (0..samples)
        .map(|k| random_interior_point(&mut stream_rng(seed, k as u64), q.dim(), SAMPLE_FLOOR))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for &scale in candidates {
        let gs = GradientStructure::new(q, family, scale)?;
        let mut dev: f64 = 0.0;
        for rho in &points {
            let f = flow_field(&gs, rho)?;
            dev = dev.max(max_abs_diff(&f, &drift(rho, q)));
        }
        out.push(NormalizationCandidate { entropy_scale: scale, max_deviation: dev });
    }
    let selected = out.iter().find(|c| c.max_deviation <= NORMALIZATION_TOL).map(|c| c.entropy_scale);
    let best = out
        .iter()
        .min_by(|a, b| a.max_deviation.total_cmp(&b.max_deviation))
        .map(|c| c.entropy_scale)
        .expect("non-empty");
    Ok(NormalizationReport {
        family,
        seed,
        samples,
        tolerance: NORMALIZATION_TOL,
        candidates: out,
        selected,
        best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyComparison {
    pub seed: u64,
    pub samples: usize,
    /// `max |Psi*_cosh(rho, xi) - Psi*_ldp(rho, xi)|`.
    pub max_psi_star_discrepancy: f64,
    /// Same, relative to `max(|Psi*_ldp|, 1e-300)`.
    pub max_relative_discrepancy: f64,
    /// `max |L^cosh_ij - L^ldp_ij|` over edges, with `L^ldp_ij = pi_i Q_ij sqrt(r_i r_j)`.
    pub max_mobility_discrepancy: f64,
    /// `max |flow_cosh - Q^T rho|` at entropy scale 1.
    pub cosh_flow_deviation_scale_one: f64,
    /// `max |flow_cosh - 2 Q^T rho|` at entropy scale 1.
    pub cosh_flow_deviation_from_twice_drift: f64,
    pub worst_rho: Vec<f64>,
    pub worst_xi: Vec<f64>,
    pub tolerance: f64,
    pub coincides: bool,
}

/// Pointwise comparison of the cosh-family `Psi*` with the LDP `Psi*`.
pub fn compare_cosh_with_ldp(q: &GeneratorMatrix, samples: usize, seed: u64) -> Result<FamilyComparison> {
    if samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let ldp = GradientStructure::ldp(q)?;
    let cosh = GradientStructure::new(q, DissipationFamily::CoshFamily, 1.0)?;
    let mut report = FamilyComparison {
        seed,
        samples,
        max_psi_star_discrepancy: 0.0,
        max_relative_discrepancy: 0.0,
        max_mobility_discrepancy: 0.0,
        cosh_flow_deviation_scale_one: 0.0,
        cosh_flow_deviation_from_twice_drift: 0.0,
        worst_rho: Vec::new(),
        worst_xi: Vec::new(),
        tolerance: PSI_CROSS_CHECK_TOL,
        coincides: true,
    };
    for k in 0..samples {
        let mut rng = stream_rng(seed, k as u64);
        let rho = random_interior_point(&mut rng, q.dim(), SAMPLE_FLOOR)?;
        let xi = random_zero_sum(&mut rng, q.dim(), 1.0);
        let a = psi_star(&cosh, &rho, &xi)?;
        let b = psi_star(&ldp, &rho, &xi)?;
        let d = (a - b).abs();
        if d > report.max_psi_star_discrepancy || report.worst_rho.is_empty() {
            report.max_psi_star_discrepancy = d;
            report.worst_rho = rho.to_vec();
            report.worst_xi = xi.clone();
        }
        report.max_relative_discrepancy = report.max_relative_discrepancy.max(d / b.abs().max(1e-300));
        for &(i, j, r) in q.edges() {
            let (ri, rj) = (rho[i] / ldp.pi[i], rho[j] / ldp.pi[j]);
            let lc = family_mobility(Kernel::Cosh, ldp.pi[i] * r, ri, rj);
            let ll = ldp.pi[i] * r * (ri * rj).sqrt();
            report.max_mobility_discrepancy = report.max_mobility_discrepancy.max((lc - ll).abs());
        }
        let f = flow_field(&cosh, &rho)?;
        let d = drift(&rho, q);
        report.cosh_flow_deviation_scale_one = report.cosh_flow_deviation_scale_one.max(max_abs_diff(&f, &d));
        let twice: Vec<f64> = d.iter().map(|x| 2.0 * x).collect();
        report.cosh_flow_deviation_from_twice_drift =
            report.cosh_flow_deviation_from_twice_drift.max(max_abs_diff(&f, &twice));
    }
    report.coincides = report.max_psi_star_discrepancy <= report.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::finite_diff_gradient;
    use crate::markov::tests::{cyclic3, symmetric2};
    use crate::sampling::random_reversible_generator;
    use approx::assert_abs_diff_eq;

    #[test]
    fn critical_covector_examples() {
        let v = critical_covector(&[0.25, 0.75], &symmetric2()).unwrap();
        let expected = 0.25 * 3f64.ln();
        assert_abs_diff_eq!(v[0], -expected, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.274_653_072_167_027_1, epsilon = 1e-15);

        let q = cyclic3();
        let rho = [0.2, 0.5, 0.3];
        let v = critical_covector(&rho, &q).unwrap();
        let closed = [(0.2f64 / 0.3).ln() / 3.0, (0.5f64 / 0.2).ln() / 3.0, (0.3f64 / 0.5).ln() / 3.0];
        for (a, b) in v.iter().zip(closed) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let g = crate::markov::hamiltonian_gradient(&rho, &v, &q).unwrap();
        assert!(norm_inf(&g) <= 1e-10);
        let v = critical_covector(&[1.0 / 3.0; 3], &q).unwrap();
        assert!(norm_inf(&v) < 1e-14);
        assert!(matches!(critical_covector(&[1.0, 0.0], &symmetric2()), Err(Error::BoundaryPoint { .. })));
    }

    #[test]
    fn psi_star_examples() {
        let q = symmetric2();
        let ldp = GradientStructure::ldp(&q).unwrap();
        let quad = GradientStructure::new(&q, DissipationFamily::QuadraticFamily, 0.5).unwrap();
        let cosh = GradientStructure::new(&q, DissipationFamily::CoshFamily, 1.0).unwrap();
        for gs in [&ldp, &quad, &cosh] {
            assert_eq!(psi_star(gs, &[0.3, 0.7], &[0.0, 0.0]).unwrap(), 0.0);
        }
        // sqrt(rho1 rho2 Q12 Q21) (e^{-2} - 1) + same (e^{2} - 1) over both
        // ordered pairs = 2 * (1/2) (cosh 2 - 1).
        let v = psi_star(&ldp, &[0.5, 0.5], &[1.0, -1.0]).unwrap();
        assert_abs_diff_eq!(v, 2f64.cosh() - 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(v, 2.762_195_691_083_631, epsilon = 1e-14);

        let v = psi_star(&quad, &[0.25, 0.75], &[1.0, -1.0]).unwrap();
        assert_abs_diff_eq!(v, 2.0 / 3f64.ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(v, 1.820_478_453_253_675, epsilon = 1e-14);
        // Logarithmic mean coded independently: (a - b) / (ln a - ln b).
        let (a, b): (f64, f64) = (1.5, 0.5);
        let logmean = (a - b) / (a.ln() - b.ln());
        assert_abs_diff_eq!(v, 2.0 * 0.5 * logmean * 0.5 * 4.0, epsilon = 1e-14);

        let err = GradientStructure::new(&cyclic3(), DissipationFamily::CoshFamily, 1.0).unwrap_err();
        assert!(matches!(err, Error::NotWeaklyReversible { .. }));
    }

    #[test]
    fn mobility_guard_band_is_continuous() {
        for kernel in [Kernel::Cosh, Kernel::Quadratic] {
            let at = family_mobility(kernel, 0.7, 0.4, 0.4);
            let near = family_mobility(kernel, 0.7, 0.4, 0.4 * (1.0 + 2e-8));
            assert_abs_diff_eq!(at, 0.7 * 0.4, epsilon = 1e-15);
            assert!((at - near).abs() < 1e-8);
        }
    }

    #[test]
    fn psi_examples() {
        let q = symmetric2();
        let gs = GradientStructure::ldp(&q).unwrap();
        assert_abs_diff_eq!(psi(&gs, &[0.3, 0.7], &[0.0, 0.0]).unwrap(), 0.0, epsilon = 1e-14);
        // 2a (cosh*(s1 / (2a)) + 1) with a = sqrt(rho1 rho2 Q12 Q21) = 1/2.
        let closed = 0.5f64.asinh() * 0.5 - 1.25f64.sqrt() + 1.0;
        let v = psi(&gs, &[0.5, 0.5], &[0.5, -0.5]).unwrap();
        assert_abs_diff_eq!(v, closed, epsilon = 1e-10);
        assert_abs_diff_eq!(v, 0.122_571_923_7, epsilon = 1e-9);
    }

    #[test]
    fn decomposition_examples() {
        let q = symmetric2();
        let gs = GradientStructure::ldp(&q).unwrap();
        let rho = [0.25, 0.75];
        let d = decompose(&gs, &rho, &drift(&rho, &q)).unwrap();
        assert!(d.lagrangian.abs() <= 1e-10);
        assert!((d.psi + d.psi_star_at_minus_v + d.pairing).abs() <= 1e-7);

        let d = decompose(&gs, &rho, &[0.1, -0.1]).unwrap();
        assert!(d.residual.abs() <= 1e-7);
        // Grid-search oracles over xi_1 - xi_2 for L and Psi.
        let grid_sup = |f: &dyn Fn(f64) -> f64| {
            let mut best = f64::NEG_INFINITY;
            for k in -200_000..=200_000 {
                best = best.max(f(k as f64 * 5e-5));
            }
            best
        };
        let l = grid_sup(&|z| 0.1 * z - (0.25 * ((-z).exp() - 1.0) + 0.75 * (z.exp() - 1.0)));
        assert_abs_diff_eq!(d.lagrangian, l, epsilon = 1e-8);
        let w = (0.25f64 * 0.75).sqrt();
        let p = grid_sup(&|z| 0.1 * z - w * ((-z).exp() - 1.0) - w * (z.exp() - 1.0));
        assert_abs_diff_eq!(d.psi, p, epsilon = 1e-8);

        let cyc = cyclic3();
        let gs = GradientStructure::ldp(&cyc).unwrap();
        let d = decompose(&gs, &[0.2, 0.5, 0.3], &[0.3, -0.1, -0.2]).unwrap();
        assert!(!d.gradient_system);
        assert!(d.residual.abs() <= 1e-7, "{}", d.residual);
    }

    #[test]
    fn flow_field_examples() {
        let (q, _) = random_reversible_generator(4, 11).unwrap();
        let gs = GradientStructure::ldp(&q).unwrap();
        let f = flow_field(&gs, &gs.pi).unwrap();
        assert!(norm_inf(&f) < 1e-15);
        let rho = [0.1, 0.2, 0.3, 0.4];
        let f = flow_field(&gs, &rho).unwrap();
        assert!(max_abs_diff(&f, &drift(&rho, &q)) < 1e-12);

        let quad = GradientStructure::new(&q, DissipationFamily::QuadraticFamily, 0.5).unwrap();
        let f = flow_field(&quad, &rho).unwrap();
        assert!(max_abs_diff(&f, &drift(&rho, &q)) < 1e-12);

        let gs = GradientStructure::ldp(&cyclic3()).unwrap();
        assert!(matches!(flow_field(&gs, &[0.2, 0.5, 0.3]), Err(Error::NotGradientSystem { .. })));
    }

    #[test]
    fn flow_field_matches_finite_differences() {
        let (q, _) = random_reversible_generator(4, 5).unwrap();
        let rho = [0.15, 0.35, 0.3, 0.2];
        for gs in [
            GradientStructure::ldp(&q).unwrap(),
            GradientStructure::new(&q, DissipationFamily::CoshFamily, 1.0).unwrap(),
            GradientStructure::new(&q, DissipationFamily::QuadraticFamily, 0.5).unwrap(),
        ] {
            let minus: Vec<f64> = gs.entropy_gradient(&rho).unwrap().iter().map(|x| -x).collect();
            let fd = finite_diff_gradient(|x| psi_star(&gs, &rho, x).unwrap(), &minus, 1e-5).unwrap();
            let f = flow_field(&gs, &rho).unwrap();
            assert!(max_abs_diff(&f, &fd) < 1e-6);
        }
    }

    #[test]
    fn diagnostics_dichotomy() {
        let d = diagnostics(&symmetric2(), 20, 3).unwrap();
        assert!(d.time_symmetry_defect_max <= 1e-7, "{d:?}");
        assert!(d.psi_star_symmetry_defect <= 1e-7);
        assert!(d.integrability_defect <= 1e-7);
        assert!(d.decomposition_residual_max <= 1e-7);
        assert!(d.critical_covector_is_half_entropy_gradient && d.gradient_system);

        let d = diagnostics(&cyclic3(), 20, 3).unwrap();
        assert!(d.time_symmetry_defect_max > 0.01);
        assert!(d.integrability_defect > 0.01, "{}", d.integrability_defect);
        assert!(!d.critical_covector_is_half_entropy_gradient && !d.gradient_system);
        assert!(d.jacobian_asymmetry > 0.01);

        let (q, _) = random_reversible_generator(5, 17).unwrap();
        let d = diagnostics(&q, 20, 4).unwrap();
        assert!(d.time_symmetry_defect_max <= 1e-6);
        assert!(d.integrability_defect <= 1e-6, "{}", d.integrability_defect);
        assert!(d.psi_star_symmetry_defect <= 1e-6);
        assert!(d.jacobian_asymmetry <= 1e-5, "{}", d.jacobian_asymmetry);
    }

    #[test]
    fn cyclic_loop_integral_matches_closed_form() {
        // V_L for the cyclic chain integrates in closed form along straight
        // segments: oint sum_k V_k d rho_k with V = (1/3)(log r1/r3, ...).
        let q = cyclic3();
        let verts = vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.5, 0.3], vec![0.3, 0.2, 0.5]];
        let a = loop_integral(&q, &verts, 100).unwrap();
        let b = loop_integral(&q, &verts, 200).unwrap();
        assert!((a - b).abs() < 1e-10);
        assert!(a.abs() > 0.01);
    }

    #[test]
    fn quadratic_normalization_is_one_half() {
        let (q, _) = random_reversible_generator(4, 2).unwrap();
        let r = family_normalization(&q, DissipationFamily::QuadraticFamily, &[0.5, 1.0], 20, 9).unwrap();
        assert_eq!(r.selected, Some(0.5));
        let r = family_normalization(&q, DissipationFamily::CoshFamily, &[0.5, 1.0], 20, 9).unwrap();
        assert_eq!(r.selected, None);
        let c = compare_cosh_with_ldp(&q, 20, 9).unwrap();
        assert!(c.cosh_flow_deviation_from_twice_drift < 1e-12);
        assert!(!c.coincides);
    }
}
