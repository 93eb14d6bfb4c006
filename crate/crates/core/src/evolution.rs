//! Fixed-step RK4 integration of `rho' = Q^T rho` and of gradient flows.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gradient::{flow_field, DissipationFamily, GradientStructure};
use crate::markov::{analyze_balance, relative_entropy, GeneratorMatrix, SimplexPoint};
use crate::util::max_abs_diff;

/// Largest negative excursion tolerated before a step is rejected.
pub const SIMPLEX_EXCURSION_TOL: f64 = 1e-6;
/// Gradient flows halt when an entry drops below this.
pub const FLOW_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorMeta {
    pub method: String,
    pub dt: f64,
    pub rejected_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SimplexPoint>,
    /// Relative entropy (times the structure's scale for gradient flows);
    /// `NaN` when the chain has no unique invariant measure.
    pub entropy_values: Vec<f64>,
    pub integrator_meta: IntegratorMeta,
}

impl Trajectory {
    pub fn final_state(&self) -> &SimplexPoint {
        self.states.last().expect("trajectories have at least one state")
    }

    /// CSV with header `t,rho_1..rho_J,entropy`, one row per step.
    pub fn to_csv(&self) -> String {
        let dim = self.states.first().map_or(0, |s| s.len());
        let mut out = String::from("t");
        for k in 1..=dim {
            let _ = write!(out, ",rho_{k}");
        }
        out.push_str(",entropy\n");
        for ((t, rho), e) in self.times.iter().zip(&self.states).zip(&self.entropy_values) {
            let _ = write!(out, "{t}");
            for v in rho.iter() {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{e}");
        }
        out
    }
}

/// Uniform grid `0, dt, 2 dt, ..., T`; the last step is shortened when `dt`
/// does not divide `T`.
pub fn time_grid(t_end: f64, dt: f64) -> Result<Vec<f64>> {
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(Error::invalid(format!("horizon T must be positive, got {t_end}")));
    }
    if !(dt > 0.0) || dt > t_end {
        return Err(Error::invalid(format!("step dt must satisfy 0 < dt <= T, got {dt}")));
    }
    let steps = (t_end / dt - 1e-9).ceil().max(1.0) as usize;
    let mut times: Vec<f64> = (0..steps).map(|k| k as f64 * dt).collect();
    times.push(t_end);
    Ok(times)
}

fn rk4_step<F>(f: &F, y: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let axpy = |a: &[f64], c: f64, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, z)| x + c * z).collect() };
    let k1 = f(y)?;
    let k2 = f(&axpy(y, 0.5 * h, &k1))?;
    let k3 = f(&axpy(y, 0.5 * h, &k2))?;
    let k4 = f(&axpy(y, h, &k3))?;
    Ok((0..y.len())
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

fn renormalize(mut y: Vec<f64>) -> Vec<f64> {
    let sum: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v /= sum);
    y
}

/// RK4 for `rho' = Q^T rho` with mass renormalization each step.
pub fn integrate_linear(rho0: &SimplexPoint, q: &GeneratorMatrix, t_end: f64, dt: f64) -> Result<Trajectory> {
    if rho0.len() != q.dim() {
        return Err(Error::invalid("initial state and generator dimensions differ"));
    }
    let times = time_grid(t_end, dt)?;
    let pi = analyze_balance(q, None).ok().map(|b| b.invariant_measure);
    let entropy = |rho: &[f64]| pi.as_ref().map_or(f64::NAN, |p| relative_entropy(rho, p).unwrap_or(f64::NAN));
    let f = |y: &[f64]| -> Result<Vec<f64>> { Ok(q.transpose_apply(y)) };
    let mut states = vec![rho0.clone()];
    let mut entropy_values = vec![entropy(rho0)];
    let mut y = rho0.to_vec();
    for w in times.windows(2) {
        y = renormalize(rk4_step(&f, &y, w[1] - w[0])?);
        let min = y.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -SIMPLEX_EXCURSION_TOL {
            return Err(Error::StepSizeTooLarge { time: w[1], excursion: -min });
        }
        // Rounding-level negatives are clipped so the state stays a probability vector.
        let point = SimplexPoint::normalized(y.iter().map(|v| v.max(0.0)).collect())?;
        entropy_values.push(entropy(&point));
        states.push(point);
    }
    Ok(Trajectory {
        times,
        states,
        entropy_values,
        integrator_meta: IntegratorMeta { method: "rk4".into(), dt, rejected_steps: 0 },
    })
}

/// RK4 for `rho' = D_xi Psi*(rho, -DS(rho))`.
pub fn integrate_gradient_flow(rho0: &SimplexPoint, gs: &GradientStructure, t_end: f64, dt: f64) -> Result<Trajectory> {
    if !gs.balance.detailed_balance {
        return Err(Error::NotGradientSystem { max_violation: gs.balance.max_violation });
    }
    if rho0.len() != gs.dim() {
        return Err(Error::invalid("initial state and structure dimensions differ"));
    }
    rho0.require_interior(FLOW_FLOOR)?;
    let times = time_grid(t_end, dt)?;
    let f = |y: &[f64]| -> Result<Vec<f64>> {
        if let Some((state, &value)) = y.iter().enumerate().find(|(_, &v)| !(v >= FLOW_FLOOR)) {
            return Err(Error::BoundaryPoint { state, value });
        }
        Ok(flow_field(gs, y)?.into_inner())
    };
    let mut states = vec![rho0.clone()];
    let mut entropy_values = vec![gs.entropy(rho0)?];
    let mut y = rho0.to_vec();
    for w in times.windows(2) {
        y = renormalize(rk4_step(&f, &y, w[1] - w[0])?);
        if let Some((state, &value)) = y.iter().enumerate().find(|(_, &v)| !(v >= FLOW_FLOOR)) {
            return Err(Error::BoundaryPoint { state, value });
        }
        let point = SimplexPoint::normalized(y.clone())?;
        entropy_values.push(gs.entropy(&point)?);
        states.push(point);
    }
    let method = match gs.family {
        DissipationFamily::LdpExact => "rk4-gradient-flow-ldp",
        DissipationFamily::CoshFamily => "rk4-gradient-flow-cosh",
        DissipationFamily::QuadraticFamily => "rk4-gradient-flow-quadratic",
    };
    Ok(Trajectory {
        times,
        states,
        entropy_values,
        integrator_meta: IntegratorMeta { method: method.into(), dt, rejected_steps: 0 },
    })
}

/// `exp(t Q^T) rho0`: symmetric eigendecomposition for reversible chains,
/// the matrix exponential otherwise.
pub fn exact_solution(rho0: &[f64], q: &GeneratorMatrix, t: f64) -> Result<Vec<f64>> {
    Ok(Propagator::new(rho0, q)?.at(t))
}

/// Exact solution sampled on a trajectory's time grid.
pub fn exact_trajectory(rho0: &SimplexPoint, q: &GeneratorMatrix, times: &[f64]) -> Result<Vec<Vec<f64>>> {
    let p = Propagator::new(rho0, q)?;
    Ok(times.iter().map(|&t| p.at(t)).collect())
}

enum Propagator {
    /// Coefficients in the eigenbasis of `Pi^{-1/2} Q^T Pi^{1/2}`.
    Spectral { vectors: DMatrix<f64>, values: DVector<f64>, coeffs: DVector<f64>, sq: Vec<f64> },
    General { qt: DMatrix<f64>, rho0: DVector<f64> },
}

impl Propagator {
    fn new(rho0: &[f64], q: &GeneratorMatrix) -> Result<Self> {
        let dim = q.dim();
        if rho0.len() != dim {
            return Err(Error::invalid("initial state and generator dimensions differ"));
        }
        let qt = q.matrix().transpose();
        if let Ok(b) = analyze_balance(q, None) {
            if b.detailed_balance {
                // Pi^{-1/2} Q^T Pi^{1/2} is symmetric under detailed balance.
                let sq: Vec<f64> = b.invariant_measure.iter().map(|p| p.sqrt()).collect();
                let mut s = DMatrix::from_fn(dim, dim, |i, j| qt[(i, j)] * sq[j] / sq[i]);
                s = (&s + s.transpose()) * 0.5;
                let eig = SymmetricEigen::new(s);
                let u = DVector::from_iterator(dim, rho0.iter().zip(&sq).map(|(r, p)| r / p));
                let coeffs = eig.eigenvectors.transpose() * u;
                return Ok(Self::Spectral { vectors: eig.eigenvectors, values: eig.eigenvalues, coeffs, sq });
            }
        }
        Ok(Self::General { qt, rho0: DVector::from_column_slice(rho0) })
    }

    fn at(&self, t: f64) -> Vec<f64> {
        match self {
            Self::Spectral { vectors, values, coeffs, sq } => {
                let c = DVector::from_iterator(coeffs.len(), coeffs.iter().zip(values.iter()).map(|(c, l)| c * (l * t).exp()));
                let u = vectors * c;
                u.iter().zip(sq).map(|(v, p)| v * p).collect()
            }
            Self::General { qt, rho0 } => ((qt * t).exp() * rho0).iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGap {
    pub sup_norm_gap: f64,
    pub at_time: f64,
}

/// `max_t |a(t) - b(t)|_inf` over a shared grid.
pub fn compare_trajectories(a: &Trajectory, b: &Trajectory) -> Result<TrajectoryGap> {
    if a.times.len() != b.times.len() {
        return Err(Error::GridMismatch(format!("{} vs {} time points", a.times.len(), b.times.len())));
    }
    if let Some((k, (s, t))) = a
        .times
        .iter()
        .zip(&b.times)
        .enumerate()
        .find(|(_, (s, t))| (*s - *t).abs() > 1e-12 * s.abs().max(1.0))
    {
        return Err(Error::GridMismatch(format!("time {k} differs: {s} vs {t}")));
    }
    let mut gap = TrajectoryGap { sup_norm_gap: 0.0, at_time: a.times[0] };
    for ((t, x), y) in a.times.iter().zip(&a.states).zip(&b.states) {
        if x.len() != y.len() {
            return Err(Error::GridMismatch("state dimensions differ".into()));
        }
        let d = max_abs_diff(x, y);
        if d > gap.sup_norm_gap {
            gap = TrajectoryGap { sup_norm_gap: d, at_time: *t };
        }
    }
    Ok(gap)
}

/// `max_t |trajectory(t) - reference(t)|_inf`.
pub fn error_against(trajectory: &Trajectory, reference: &[Vec<f64>]) -> f64 {
    trajectory
        .states
        .iter()
        .zip(reference)
        .map(|(x, y)| max_abs_diff(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradient::psi;
    use crate::markov::tests::{cyclic3, symmetric2};
    use crate::sampling::random_reversible_generator;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_examples() {
        let q = symmetric2();
        let pi = SimplexPoint::uniform(2);
        let tr = integrate_linear(&pi, &q, 1.0, 1e-3).unwrap();
        assert!(tr.states.iter().all(|s| max_abs_diff(s, &pi) < 1e-15));

        let tr = integrate_linear(&SimplexPoint::vertex(2, 0), &q, 1.0, 1e-3).unwrap();
        let expected = 0.5 + 0.5 * (-2.0f64).exp();
        assert_abs_diff_eq!(tr.final_state()[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.567_667_641_618_306_3, epsilon = 1e-15);
        let exact = exact_solution(&[1.0, 0.0], &q, 1.0).unwrap();
        assert_abs_diff_eq!(exact[0], expected, epsilon = 1e-14);

        let tr = integrate_linear(&SimplexPoint::vertex(3, 0), &cyclic3(), 10.0, 1e-3).unwrap();
        for v in tr.final_state().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let exact = exact_solution(&[1.0, 0.0, 0.0], &cyclic3(), 10.0).unwrap();
        assert!(max_abs_diff(&exact, tr.final_state()) < 1e-12);
        for tr in [&tr] {
            assert!(tr.states.iter().all(|s| (s.iter().sum::<f64>() - 1.0).abs() <= 1e-10));
            assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn gradient_flow_examples() {
        let q = symmetric2();
        let gs = GradientStructure::ldp(&q).unwrap();
        let tr = integrate_gradient_flow(&gs.pi, &gs, 1.0, 1e-2).unwrap();
        assert!(tr.states.iter().all(|s| max_abs_diff(s, &gs.pi) < 1e-15));

        let rho0 = SimplexPoint::new(vec![0.9, 0.1]).unwrap();
        let tr = integrate_gradient_flow(&rho0, &gs, 5.0, 1e-3).unwrap();
        assert!(tr.entropy_values.windows(2).all(|w| w[1] < w[0]));
        assert!(*tr.entropy_values.last().unwrap() < 1e-8);

        let (q, _) = random_reversible_generator(4, 1).unwrap();
        let gs = GradientStructure::ldp(&q).unwrap();
        let rho0 = SimplexPoint::new(vec![0.7, 0.1, 0.1, 0.1]).unwrap();
        let a = integrate_linear(&rho0, &q, 5.0, 1e-3).unwrap();
        let b = integrate_gradient_flow(&rho0, &gs, 5.0, 1e-3).unwrap();
        assert!(compare_trajectories(&a, &b).unwrap().sup_norm_gap <= 1e-6);
        let quad = GradientStructure::new(&q, DissipationFamily::QuadraticFamily, 0.5).unwrap();
        let c = integrate_gradient_flow(&rho0, &quad, 5.0, 1e-3).unwrap();
        assert!(compare_trajectories(&a, &c).unwrap().sup_norm_gap <= 1e-6);

        let cyc = GradientStructure::ldp(&cyclic3()).unwrap();
        assert!(matches!(
            integrate_gradient_flow(&SimplexPoint::uniform(3), &cyc, 1.0, 0.1),
            Err(Error::NotGradientSystem { .. })
        ));
        assert!(matches!(
            integrate_gradient_flow(&SimplexPoint::vertex(2, 0), &GradientStructure::ldp(&symmetric2()).unwrap(), 1.0, 0.1),
            Err(Error::BoundaryPoint { .. })
        ));
    }

    #[test]
    fn entropy_dissipation_identity() {
        // d/dt S = -(Psi(rho, rho') + Psi*(rho, -DS)); with Psi* = Psi at the
        // flow, compare a centered difference of S with -2 Psi(rho, rho').
        let (q, _) = random_reversible_generator(3, 4).unwrap();
        let gs = GradientStructure::ldp(&q).unwrap();
        let rho0 = SimplexPoint::new(vec![0.6, 0.3, 0.1]).unwrap();
        let dt = 1e-3;
        let tr = integrate_gradient_flow(&rho0, &gs, 1.0, dt).unwrap();
        for k in (1..tr.times.len() - 1).step_by(100) {
            let rho = &tr.states[k];
            let s = flow_field(&gs, rho).unwrap();
            let dissipation = psi(&gs, rho, &s).unwrap() + crate::gradient::psi_star(&gs, rho, &gs.entropy_gradient(rho).unwrap().iter().map(|x| -x).collect::<Vec<_>>()).unwrap();
            let ds = (tr.entropy_values[k + 1] - tr.entropy_values[k - 1]) / (2.0 * dt);
            assert!((ds + dissipation).abs() <= 1e-4, "{ds} vs {dissipation}");
        }
    }

    #[test]
    fn grids_and_mismatch() {
        assert_eq!(time_grid(1.0, 0.3).unwrap(), vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]);
        assert_eq!(time_grid(1.0, 0.25).unwrap().len(), 5);
        assert!(time_grid(1.0, 2.0).is_err());
        let q = symmetric2();
        let a = integrate_linear(&SimplexPoint::vertex(2, 0), &q, 1.0, 0.1).unwrap();
        let b = integrate_linear(&SimplexPoint::vertex(2, 0), &q, 1.0, 0.05).unwrap();
        assert!(matches!(compare_trajectories(&a, &b), Err(Error::GridMismatch(_))));
        assert_eq!(compare_trajectories(&a, &a).unwrap().sup_norm_gap, 0.0);
        let csv = a.to_csv();
        assert!(csv.starts_with("t,rho_1,rho_2,entropy\n0,1,0,"));
        assert_eq!(csv.lines().count(), 12);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let (q, _) = random_reversible_generator(4, 3).unwrap();
        let rho0 = SimplexPoint::new(vec![0.7, 0.1, 0.1, 0.1]).unwrap();
        let err = |dt: f64| {
            let tr = integrate_linear(&rho0, &q, 2.0, dt).unwrap();
            error_against(&tr, &exact_trajectory(&rho0, &q, &tr.times).unwrap())
        };
        let ratio = err(0.2) / err(0.1);
        assert!(ratio > 12.0 && ratio < 20.0, "{ratio}");
    }
}
