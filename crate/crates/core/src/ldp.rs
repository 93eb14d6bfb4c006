//! Particle simulation under tilted generators, Girsanov log-densities,
//! the path rate functional and importance-sampled tube probabilities.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Deref;

use crate::convex::ConjugateOptions;
use crate::error::{Error, Result};
use crate::markov::{lagrangian_from, GeneratorMatrix, SimplexPoint, EXP_LIMIT};
use crate::sampling::stream_rng;
use crate::util::{log_sum_exp, norm_inf, pairwise_sum};

/// Quadrature error estimate above which the pairing route raises a warning.
pub const QUADRATURE_WARN: f64 = 1e-9;
/// Default moving-average window for empirical paths.
pub const DEFAULT_MOLLIFY_WINDOW: usize = 5;

/// Time-dependent covector `xi_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TiltField {
    Constant { values: Vec<f64> },
    /// `values[k]` on `[knots[k], knots[k+1])`; clamped outside the knots.
    PiecewiseConstant { knots: Vec<f64>, values: Vec<Vec<f64>> },
    /// Linear interpolation between knots; clamped outside.
    PiecewiseLinear { knots: Vec<f64>, values: Vec<Vec<f64>> },
}

/// A time interval on which `xi_t = a + b (t - start)`.
#[derive(Debug, Clone, PartialEq)]
struct Segment {
    start: f64,
    end: f64,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Segment {
    fn at(&self, t: f64) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| a + b * (t - self.start)).collect()
    }
    fn at_state(&self, t: f64, x: usize) -> f64 {
        self.a[x] + self.b[x] * (t - self.start)
    }
    fn is_constant(&self) -> bool {
        self.b.iter().all(|&b| b == 0.0)
    }
}

impl TiltField {
    pub fn zero(dim: usize) -> Self {
        Self::Constant { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Constant { values } => values.len(),
            Self::PiecewiseConstant { values, .. } | Self::PiecewiseLinear { values, .. } => {
                values.first().map_or(0, Vec::len)
            }
        }
    }

    pub fn smoothness(&self) -> &'static str {
        match self {
            Self::Constant { .. } => "constant in time",
            Self::PiecewiseConstant { .. } => "piecewise constant; jumps at knots",
            Self::PiecewiseLinear { .. } => "continuous, piecewise C1",
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let (knots, values) = match self {
            Self::Constant { values } => {
                return check_values(std::slice::from_ref(values), dim);
            }
            Self::PiecewiseConstant { knots, values } | Self::PiecewiseLinear { knots, values } => (knots, values),
        };
        if knots.is_empty() || knots.len() != values.len() {
            return Err(Error::invalid("tilt needs one value vector per knot"));
        }
        if knots.iter().any(|t| !t.is_finite()) || knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("tilt knots must be finite and strictly increasing"));
        }
        check_values(values, dim)
    }

    /// `max_{t, i} |xi_t(i)|`.
    pub fn max_abs(&self) -> f64 {
        match self {
            Self::Constant { values } => norm_inf(values),
            Self::PiecewiseConstant { values, .. } | Self::PiecewiseLinear { values, .. } => {
                values.iter().map(|v| norm_inf(v)).fold(0.0, f64::max)
            }
        }
    }

    /// `xi_t`, right-continuous at jumps.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        match self {
            Self::Constant { values } => values.clone(),
            Self::PiecewiseConstant { knots, values } => {
                let k = knots.partition_point(|&s| s <= t);
                values[k.saturating_sub(1)].clone()
            }
            Self::PiecewiseLinear { knots, values } => {
                let k = knots.partition_point(|&s| s <= t);
                if k == 0 {
                    values[0].clone()
                } else if k == knots.len() {
                    values[k - 1].clone()
                } else {
                    let w = (t - knots[k - 1]) / (knots[k] - knots[k - 1]);
                    values[k - 1].iter().zip(&values[k]).map(|(a, b)| a + w * (b - a)).collect()
                }
            }
        }
    }

    /// Splits `[0, t_end]` at the knots.
    fn segments(&self, t_end: f64) -> Vec<Segment> {
        let mut cuts = vec![0.0];
        if let Self::PiecewiseConstant { knots, .. } | Self::PiecewiseLinear { knots, .. } = self {
            cuts.extend(knots.iter().copied().filter(|&k| k > 0.0 && k < t_end));
        }
        cuts.push(t_end);
        cuts.windows(2)
            .map(|w| {
                let a = self.value_at(w[0]);
                let b = match self {
                    Self::PiecewiseLinear { .. } => {
                        let end = self.value_at(w[1]);
                        end.iter().zip(&a).map(|(e, s)| (e - s) / (w[1] - w[0])).collect()
                    }
                    _ => vec![0.0; a.len()],
                };
                Segment { start: w[0], end: w[1], a, b }
            })
            .collect()
    }
}

fn check_values(values: &[Vec<f64>], dim: usize) -> Result<()> {
    for v in values {
        if v.len() != dim {
            return Err(Error::invalid(format!("tilt vector has length {}, expected {dim}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("tilt has non-finite entries"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub particle: usize,
    pub from: usize,
    pub to: usize,
}

/// Jump record of `n` particles on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticlePath {
    pub n: usize,
    pub dim: usize,
    pub initial_states: Vec<usize>,
    /// Sorted by `(time, particle)`.
    pub jumps: Vec<Jump>,
    pub horizon: f64,
}

impl ParticlePath {
    /// Checks jump times, ordering and per-particle state consistency.
    pub fn validate(&self) -> Result<()> {
        if self.initial_states.len() != self.n || self.initial_states.iter().any(|&s| s >= self.dim) {
            return Err(Error::invalid("inconsistent initial states"));
        }
        let mut state = self.initial_states.clone();
        let mut prev = (0.0, 0usize);
        for (k, j) in self.jumps.iter().enumerate() {
            if !(j.time > 0.0 && j.time <= self.horizon) {
                return Err(Error::invalid(format!("jump {k} at time {} outside (0, T]", j.time)));
            }
            if k > 0 && (j.time, j.particle) <= prev {
                return Err(Error::invalid(format!("jump {k} is out of order")));
            }
            if j.particle >= self.n || j.from == j.to || state[j.particle] != j.from || j.to >= self.dim {
                return Err(Error::invalid(format!("jump {k} is inconsistent with the particle's state")));
            }
            state[j.particle] = j.to;
            prev = (j.time, j.particle);
        }
        Ok(())
    }

    /// Jumps of each particle, in time order.
    pub fn per_particle(&self) -> Vec<Vec<Jump>> {
        let mut out = vec![Vec::new(); self.n];
        for j in &self.jumps {
            out[j.particle].push(*j);
        }
        out
    }

    pub fn jump_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n];
        for j in &self.jumps {
            counts[j.particle] += 1;
        }
        counts
    }
}

/// Largest-remainder rounding of `n * rho0`; particles are assigned to
/// states in increasing order.
pub fn deterministic_assignment(rho0: &[f64], n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    let rho0 = SimplexPoint::new(rho0.to_vec())?;
    let exact: Vec<f64> = rho0.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[k] += 1;
        rest -= 1;
    }
    Ok(counts.iter().enumerate().flat_map(|(s, &c)| std::iter::repeat_n(s, c)).collect())
}

/// Exact simulation of independent particles under `Q` tilted by `xi_t`:
/// rates `Q_ij e^{xi_t(j) - xi_t(i)}`. Piecewise-constant pieces use direct
/// exponential clocks, time-varying pieces use thinning. Particle `k` draws
/// from stream `k` of `seed`.
pub fn simulate(
    q: &GeneratorMatrix,
    tilt: Option<&TiltField>,
    initial_states: &[usize],
    horizon: f64,
    seed: u64,
) -> Result<ParticlePath> {
    let n = initial_states.len();
    let dim = q.dim();
    if n == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
    }
    if let Some(&s) = initial_states.iter().find(|&&s| s >= dim) {
        return Err(Error::invalid(format!("initial state {s} out of range")));
    }
    let zero = TiltField::zero(dim);
    let tilt = tilt.unwrap_or(&zero);
    tilt.validate(dim)?;
    let exponent = 2.0 * tilt.max_abs();
    if exponent > EXP_LIMIT {
        return Err(Error::TiltTooStrong { exponent, limit: EXP_LIMIT });
    }
    let segments = tilt.segments(horizon);
    let out_edges: Vec<Vec<(usize, f64)>> = (0..dim)
        .map(|i| q.edges().iter().filter(|e| e.0 == i).map(|&(_, j, r)| (j, r)).collect())
        .collect();

    let per_particle: Vec<Vec<Jump>> = initial_states
        .par_iter()
        .enumerate()
        .map(|(k, &x0)| simulate_particle(k, x0, &segments, &out_edges, seed))
        .collect();
    let mut jumps: Vec<Jump> = per_particle.into_iter().flatten().collect();
    jumps.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.particle.cmp(&b.particle)));
    Ok(ParticlePath { n, dim, initial_states: initial_states.to_vec(), jumps, horizon })
}

fn simulate_particle(
    particle: usize,
    x0: usize,
    segments: &[Segment],
    out_edges: &[Vec<(usize, f64)>],
    seed: u64,
) -> Vec<Jump> {
    let mut rng = stream_rng(seed, particle as u64);
    let mut jumps = Vec::new();
    let mut x = x0;
    let mut t = 0.0;
    for seg in segments {
        if seg.is_constant() {
            loop {
                let rates: Vec<(usize, f64)> = out_edges[x]
                    .iter()
                    .map(|&(j, r)| (j, r * (seg.a[j] - seg.a[x]).exp()))
                    .collect();
                let total: f64 = rates.iter().map(|r| r.1).sum();
                if !(total > 0.0) {
                    break;
                }
                let tau: f64 = Exp1.sample(&mut rng);
                let next = t + tau / total;
                if next > seg.end {
                    break;
                }
                t = next;
                let to = pick(&rates, rng.random::<f64>() * total);
                jumps.push(Jump { time: t, particle, from: x, to });
                x = to;
            }
        } else {
            loop {
                // Exponents are linear in t, so their maxima sit at the ends.
                let bound: f64 = out_edges[x]
                    .iter()
                    .map(|&(j, r)| {
                        let s = seg.a[j] - seg.a[x];
                        let e = s + (seg.b[j] - seg.b[x]) * (seg.end - seg.start);
                        r * s.max(e).exp()
                    })
                    .sum();
                if !(bound > 0.0) {
                    break;
                }
                let tau: f64 = Exp1.sample(&mut rng);
                let next = t + tau / bound;
                if next > seg.end {
                    break;
                }
                t = next;
                let xi = seg.at(t);
                let rates: Vec<(usize, f64)> = out_edges[x].iter().map(|&(j, r)| (j, r * (xi[j] - xi[x]).exp())).collect();
                let u = rng.random::<f64>() * bound;
                let total: f64 = rates.iter().map(|r| r.1).sum();
                if u < total {
                    let to = pick(&rates, u);
                    jumps.push(Jump { time: t, particle, from: x, to });
                    x = to;
                }
            }
        }
        t = seg.end;
    }
    jumps
}

fn pick(rates: &[(usize, f64)], u: f64) -> usize {
    let mut acc = 0.0;
    for &(j, r) in rates {
        acc += r;
        if u < acc {
            return j;
        }
    }
    rates.iter().rev().find(|r| r.1 > 0.0).map(|r| r.0).expect("positive total rate")
}

/// Right-continuous empirical measure `(1/n) sum_k delta_{X_k(t)}` on a grid.
pub fn empirical_measure_path(p: &ParticlePath, grid: &[f64]) -> Result<Vec<SimplexPoint>> {
    if grid.iter().any(|&t| !(t >= 0.0 && t <= p.horizon)) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("grid must be non-decreasing and inside [0, T]"));
    }
    let mut counts = vec![0usize; p.dim];
    for &s in &p.initial_states {
        counts[s] += 1;
    }
    let mut next = 0;
    grid.iter()
        .map(|&t| {
            while next < p.jumps.len() && p.jumps[next].time <= t {
                let j = p.jumps[next];
                counts[j.from] -= 1;
                counts[j.to] += 1;
                next += 1;
            }
            SimplexPoint::normalized(counts.iter().map(|&c| c as f64).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GirsanovValue {
    /// `(1/n) log dP_xi / dP`.
    pub value: f64,
    pub quadrature_error: f64,
    pub quadrature_warning: bool,
}

/// `expm1(z) / z`, continuous at 0.
fn exprel(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else if z.abs() < 1e-5 {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// Per-particle log-density `xi_T(x_T) - xi_0(x_0) - int e^{-xi}(d_t + Q) e^{xi}(x_t) dt`,
/// averaged over particles. Time integrals are evaluated in closed form on
/// every constant-state piece.
pub fn girsanov_log_density(p: &ParticlePath, tilt: &TiltField, q: &GeneratorMatrix) -> Result<GirsanovValue> {
    tilt.validate(q.dim())?;
    if p.dim != q.dim() {
        return Err(Error::invalid("path and generator dimensions differ"));
    }
    let segments = tilt.segments(p.horizon);
    let out_edges: Vec<Vec<(usize, f64)>> = (0..q.dim())
        .map(|i| q.edges().iter().filter(|e| e.0 == i).map(|&(_, j, r)| (j, r)).collect())
        .collect();
    let per = p.per_particle();
    let terms: Vec<f64> = per
        .par_iter()
        .enumerate()
        .map(|(k, jumps)| particle_log_density(p.initial_states[k], jumps, &segments, &out_edges, p.horizon))
        .collect();
    Ok(GirsanovValue {
        value: pairwise_sum(&terms) / p.n as f64,
        quadrature_error: 0.0,
        quadrature_warning: false,
    })
}

fn particle_log_density(
    x0: usize,
    jumps: &[Jump],
    segments: &[Segment],
    out_edges: &[Vec<(usize, f64)>],
    horizon: f64,
) -> f64 {
    let last = segments.last().expect("at least one segment");
    let x_end = jumps.last().map_or(x0, |j| j.to);
    let mut total = last.at_state(horizon, x_end) - segments[0].a[x0];
    let mut x = x0;
    let mut next = 0;
    for (s, seg) in segments.iter().enumerate() {
        let mut u = seg.start;
        loop {
            let v = if next < jumps.len() && jumps[next].time <= seg.end { jumps[next].time } else { seg.end };
            // d/dt xi_t(x) plus sum_j Q_xj (e^{xi_t(j) - xi_t(x)} - 1) on [u, v].
            let len = v - u;
            let mut integral = seg.b[x] * len;
            for &(j, r) in &out_edges[x] {
                let alpha = seg.at_state(u, j) - seg.at_state(u, x);
                let beta = seg.b[j] - seg.b[x];
                integral += r * (alpha.exp() * len * exprel(beta * len) - len);
            }
            total -= integral;
            if v < seg.end || (next < jumps.len() && jumps[next].time == seg.end) {
                x = jumps[next].to;
                next += 1;
                u = v;
                if v == seg.end {
                    break;
                }
            } else {
                break;
            }
        }
        // Jump of xi itself at the knot between this piece and the next.
        if let Some(nseg) = segments.get(s + 1) {
            total -= nseg.a[x] - seg.at_state(seg.end, x);
        }
    }
    total
}

const GL16_NODES: [f64; 8] = [
    0.09501250983763745,
    0.2816035507792589,
    0.45801677765722737,
    0.6178762444026438,
    0.755404408355003,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL16_WEIGHTS: [f64; 8] = [
    0.18945061045506859,
    0.1826034150449236,
    0.16915651939500262,
    0.14959598881657676,
    0.12462897125553403,
    0.09515851168249259,
    0.062253523938647706,
    0.027152459411754037,
];
const GL8_NODES: [f64; 4] = [0.18343464249564978, 0.525532409916329, 0.7966664774136267, 0.9602898564975362];
const GL8_WEIGHTS: [f64; 4] = [0.36268378337836177, 0.31370664587788705, 0.22238103445337434, 0.10122853629037669];

fn gauss<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, nodes: &[f64], weights: &[f64]) -> f64 {
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    let mut s = 0.0;
    for (x, w) in nodes.iter().zip(weights) {
        s += w * (f(c - h * x) + f(c + h * x));
    }
    h * s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingValue {
    /// `G = jump_pairing - hamiltonian_integral`.
    pub value: f64,
    /// `(1/n) sum_jumps (xi_tau(to) - xi_tau(from))`, i.e. `int <xi, d rho>`.
    pub jump_pairing: f64,
    /// `int_0^T H(rho_t, xi_t) dt` over the empirical path.
    pub hamiltonian_integral: f64,
    /// `|GL16 - GL8|` summed over intervals.
    pub quadrature_error: f64,
    pub quadrature_warning: bool,
}

/// `G(rho, xi) = int <xi_t, d rho_t> - int H(rho_t, xi_t) dt` on the empirical
/// measure path, with 16-point Gauss-Legendre quadrature between events.
pub fn path_rate_pairing(p: &ParticlePath, tilt: &TiltField, q: &GeneratorMatrix) -> Result<PairingValue> {
    tilt.validate(q.dim())?;
    if p.dim != q.dim() {
        return Err(Error::invalid("path and generator dimensions differ"));
    }
    let n = p.n as f64;
    let pairing_terms: Vec<f64> = p
        .jumps
        .iter()
        .map(|j| {
            let xi = tilt.value_at(j.time);
            xi[j.to] - xi[j.from]
        })
        .collect();
    let jump_pairing = pairwise_sum(&pairing_terms) / n;

    let segments = tilt.segments(p.horizon);
    let mut counts = vec![0usize; p.dim];
    for &s in &p.initial_states {
        counts[s] += 1;
    }
    let mut pieces = Vec::new();
    let mut errors = Vec::new();
    let mut next = 0;
    for seg in &segments {
        let mut u = seg.start;
        loop {
            let v = if next < p.jumps.len() && p.jumps[next].time <= seg.end { p.jumps[next].time } else { seg.end };
            if v > u {
                let rho: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
                let f = |t: f64| {
                    let xi = seg.at(t);
                    q.edges()
                        .iter()
                        .map(|&(i, j, r)| rho[i] * r * (xi[j] - xi[i]).exp_m1())
                        .sum::<f64>()
                };
                let fine = gauss(&f, u, v, &GL16_NODES, &GL16_WEIGHTS);
                let coarse = gauss(&f, u, v, &GL8_NODES, &GL8_WEIGHTS);
                pieces.push(fine);
                errors.push((fine - coarse).abs());
            }
            if v < seg.end || (next < p.jumps.len() && p.jumps[next].time == seg.end) {
                let j = p.jumps[next];
                counts[j.from] -= 1;
                counts[j.to] += 1;
                next += 1;
                u = v;
                if v == seg.end {
                    break;
                }
            } else {
                break;
            }
        }
    }
    let hamiltonian_integral = pairwise_sum(&pieces);
    let quadrature_error = pairwise_sum(&errors);
    Ok(PairingValue {
        value: jump_pairing - hamiltonian_integral,
        jump_pairing,
        hamiltonian_integral,
        quadrature_error,
        quadrature_warning: quadrature_error > QUADRATURE_WARN,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRate {
    /// `int_0^T L(rho_t, rho'_t) dt` (trapezoid).
    pub value: f64,
    pub times: Vec<f64>,
    /// `L(rho_t, rho'_t)` at each grid time.
    pub integrand: Vec<f64>,
    /// Maximizing covector at each grid time.
    pub covectors: Vec<Vec<f64>>,
}

/// Velocities on a uniform grid: central differences inside, second-order
/// one-sided differences at the ends.
pub fn path_velocities<P: Deref<Target = [f64]>>(times: &[f64], path: &[P]) -> Result<Vec<Vec<f64>>> {
    let m = times.len();
    if m < 3 || path.len() != m {
        return Err(Error::invalid("need at least three grid points with one state each"));
    }
    let h = (times[m - 1] - times[0]) / (m - 1) as f64;
    if !(h > 0.0) || times.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(1.0)) {
        return Err(Error::invalid("time grid must be uniform and increasing"));
    }
    let dim = path[0].len();
    let d = |k: usize, f: &dyn Fn(usize) -> f64| -> f64 {
        if k == 0 {
            (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * h)
        } else if k == m - 1 {
            (3.0 * f(m - 1) - 4.0 * f(m - 2) + f(m - 3)) / (2.0 * h)
        } else {
            (f(k + 1) - f(k - 1)) / (2.0 * h)
        }
    };
    Ok((0..m)
        .map(|k| (0..dim).map(|i| d(k, &|l| path[l][i])).collect())
        .collect())
}

/// `I_T(rho) = int_0^T L(rho_t, rho'_t) dt`.
pub fn path_rate_functional<P: Deref<Target = [f64]>>(times: &[f64], path: &[P], q: &GeneratorMatrix) -> Result<PathRate> {
    let velocities = path_velocities(times, path)?;
    let opts = ConjugateOptions::default();
    let mut integrand = Vec::with_capacity(times.len());
    let mut covectors: Vec<Vec<f64>> = Vec::with_capacity(times.len());
    for (k, (rho, s)) in path.iter().zip(&velocities).enumerate() {
        let warm = covectors.last().map(Vec::as_slice);
        let r = lagrangian_from(rho, s, q, warm, &opts)
            .map_err(|e| Error::RateUndefined { time: times[k], source: Box::new(e) })?;
        integrand.push(r.value);
        covectors.push(r.argmax);
    }
    let h = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    let inner: Vec<f64> = integrand[1..integrand.len() - 1].to_vec();
    let value = h * (0.5 * (integrand[0] + integrand[integrand.len() - 1]) + pairwise_sum(&inner));
    Ok(PathRate { value, times: times.to_vec(), integrand, covectors })
}

/// Centered moving average with `window` points (odd), shrinking at the ends.
pub fn mollify<P: Deref<Target = [f64]>>(path: &[P], window: usize) -> Result<Vec<Vec<f64>>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid("mollifier window must be odd"));
    }
    let half = window / 2;
    let m = path.len();
    Ok((0..m)
        .map(|k| {
            let r = half.min(k).min(m - 1 - k);
            let dim = path[k].len();
            (0..dim)
                .map(|i| (k - r..=k + r).map(|l| path[l][i]).sum::<f64>() / (2 * r + 1) as f64)
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessStats {
    pub n: usize,
    pub horizon: f64,
    pub gamma: f64,
    pub m: f64,
    pub mean_jumps: f64,
    pub max_jumps: usize,
    /// `n (gamma T (e - 1) - M / 2)`.
    pub log_chernoff_bound_rhs: f64,
    /// `e^{-n M / 2} e^{n gamma T (e - 1)}`.
    pub chernoff_bound_rhs: f64,
    /// `M` above which the bound is at most 1: `2 gamma T (e - 1)`.
    pub m_threshold: f64,
}

/// Jump-count statistics and the Poisson-domination tail bound at level `m`.
pub fn tightness_stats(p: &ParticlePath, q: &GeneratorMatrix, m: f64) -> TightnessStats {
    let counts = p.jump_counts();
    let mean_jumps = counts.iter().sum::<usize>() as f64 / p.n as f64;
    let gamma = q.gamma();
    let e1 = std::f64::consts::E - 1.0;
    let n = p.n as f64;
    let log_rhs = n * (gamma * p.horizon * e1 - 0.5 * m);
    TightnessStats {
        n: p.n,
        horizon: p.horizon,
        gamma,
        m,
        mean_jumps,
        max_jumps: counts.iter().copied().max().unwrap_or(0),
        log_chernoff_bound_rhs: log_rhs,
        chernoff_bound_rhs: log_rhs.exp(),
        m_threshold: 2.0 * gamma * p.horizon * e1,
    }
}

/// A deterministic target path on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl TargetPath {
    /// `rho_t = rho` for `t` in `[0, T]`.
    pub fn constant(rho: &[f64], horizon: f64, dt: f64) -> Result<Self> {
        let times = crate::evolution::time_grid(horizon, dt)?;
        let states = vec![rho.to_vec(); times.len()];
        Ok(Self { times, states })
    }
}

/// Tilt making `target` typical: at each knot the covector with
/// `D_xi H(rho_t, xi_t) = rho'_t`, interpolated linearly.
pub fn optimal_tilt(q: &GeneratorMatrix, target: &TargetPath) -> Result<TiltField> {
    let rate = path_rate_functional(&target.times, &target.states, q)?;
    Ok(TiltField::PiecewiseLinear { knots: target.times.clone(), values: rate.covectors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_list: Vec<usize>,
    pub replicas: usize,
    pub tube_radius: f64,
    pub seed: u64,
    /// Also run untilted replicas.
    pub plain_mc: bool,
    /// Report the standard-error flag when `SE / I_T` exceeds this.
    pub variance_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRow {
    pub n: usize,
    pub replica: usize,
    pub tilted: bool,
    pub hit: bool,
    pub max_distance: f64,
    /// Girsanov log-density per particle.
    pub g: f64,
    /// `-n g` for hits, `-inf` otherwise (the log importance weight).
    pub log_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub n: usize,
    pub replicas: usize,
    pub tilted_hits: usize,
    /// Fraction of tilted replicas inside the tube.
    pub concentration_fraction: f64,
    /// Importance-weighted `log p_hat`.
    pub log_p_hat: f64,
    /// `-(1/n) log p_hat`; `None` with zero hits.
    pub estimate: Option<f64>,
    /// Delta-method standard error of `estimate`.
    pub standard_error: Option<f64>,
    pub relative_error: Option<f64>,
    pub within_tolerance: Option<bool>,
    pub variance_flag: bool,
    pub plain_hits: Option<usize>,
    pub plain_estimate: Option<f64>,
    /// Zero hits for one of the estimators.
    pub inf_estimate: bool,
    pub max_girsanov_discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rate_functional: f64,
    pub tube_metric: String,
    pub tolerance: f64,
    pub rows: Vec<EstimateRow>,
    pub replicas: Vec<ReplicaRow>,
}

/// Relative tolerance of the importance-sampled rate estimate.
pub const RATE_ESTIMATE_TOL: f64 = 0.25;

fn replica_seed(seed: u64, n: usize, replica: usize, tilted: bool) -> u64 {
    let stream = ((tilted as u64) << 63) | ((n as u64) << 24) | replica as u64;
    stream_rng(seed, stream).next_u64()
}

/// Importance-sampled estimate of `-(1/n) log P(rho^n in tube around target)`
/// compared with `I_T(target)`.
pub fn rate_vs_probability_experiment(
    q: &GeneratorMatrix,
    target: &TargetPath,
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    if !(config.tube_radius > 0.0) || config.replicas == 0 || config.n_list.is_empty() {
        return Err(Error::invalid("experiment needs tube_radius > 0, replicas >= 1 and a non-empty n_list"));
    }
    let horizon = *target.times.last().ok_or_else(|| Error::invalid("empty target path"))?;
    if target.times[0] != 0.0 {
        return Err(Error::invalid("target path must start at t = 0"));
    }
    let rate = path_rate_functional(&target.times, &target.states, q)?.value;
    let tilt = optimal_tilt(q, target)?;
    let mut rows = Vec::new();
    let mut replicas = Vec::new();
    for &n in &config.n_list {
        let initial = deterministic_assignment(&target.states[0], n)?;
        let run = |tilted: bool| -> Result<Vec<(ReplicaRow, f64)>> {
            let out: Vec<Result<(ReplicaRow, f64)>> = (0..config.replicas)
                .into_par_iter()
                .map(|r| {
                    let seed = replica_seed(config.seed, n, r, tilted);
                    let path = simulate(q, tilted.then_some(&tilt), &initial, horizon, seed)?;
                    let emp = empirical_measure_path(&path, &target.times)?;
                    let max_distance = emp
                        .iter()
                        .zip(&target.states)
                        .map(|(a, b)| crate::util::max_abs_diff(a, b))
                        .fold(0.0, f64::max);
                    let hit = max_distance <= config.tube_radius;
                    let (g, discrepancy) = if tilted {
                        let g = girsanov_log_density(&path, &tilt, q)?.value;
                        let alt = path_rate_pairing(&path, &tilt, q)?.value;
                        (g, (g - alt).abs())
                    } else {
                        (0.0, 0.0)
                    };
                    let log_weight = if hit { -(n as f64) * g } else { f64::NEG_INFINITY };
                    Ok((ReplicaRow { n, replica: r, tilted, hit, max_distance, g, log_weight }, discrepancy))
                })
                .collect();
            out.into_iter().collect()
        };
        let tilted = run(true)?;
        let lw: Vec<f64> = tilted.iter().map(|(r, _)| r.log_weight).collect();
        let hits = tilted.iter().filter(|(r, _)| r.hit).count();
        let max_girsanov_discrepancy = tilted.iter().map(|(_, d)| *d).fold(0.0, f64::max);
        let big_r = config.replicas as f64;
        let log_p_hat = log_sum_exp(&lw) - big_r.ln();
        let (estimate, standard_error) = if hits > 0 {
            let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = lw.iter().map(|x| (x - m).exp()).collect();
            let mean = pairwise_sum(&w) / big_r;
            let dev: Vec<f64> = w.iter().map(|x| (x - mean).powi(2)).collect();
            let var = if config.replicas > 1 { pairwise_sum(&dev) / (big_r - 1.0) } else { 0.0 };
            let rel_se_p = var.sqrt() / (big_r.sqrt() * mean);
            (Some(-log_p_hat / n as f64), Some(rel_se_p / n as f64))
        } else {
            (None, None)
        };
        let relative_error = estimate.map(|e| (e - rate) / rate);
        let variance_flag = standard_error.is_none_or(|se| se / rate > config.variance_threshold);
        let (plain_hits, plain_estimate) = if config.plain_mc {
            let plain = run(false)?;
            let h = plain.iter().filter(|(r, _)| r.hit).count();
            replicas.extend(plain.into_iter().map(|(r, _)| r));
            (Some(h), (h > 0).then(|| -((h as f64) / big_r).ln() / n as f64))
        } else {
            (None, None)
        };
        let inf_estimate = estimate.is_none() || plain_hits == Some(0);
        rows.push(EstimateRow {
            n,
            replicas: config.replicas,
            tilted_hits: hits,
            concentration_fraction: hits as f64 / big_r,
            log_p_hat,
            estimate,
            standard_error,
            relative_error,
            within_tolerance: relative_error.map(|e| e.abs() <= RATE_ESTIMATE_TOL),
            variance_flag,
            plain_hits,
            plain_estimate,
            inf_estimate,
            max_girsanov_discrepancy,
        });
        replicas.extend(tilted.into_iter().map(|(r, _)| r));
    }
    Ok(ExperimentReport {
        config: config.clone(),
        rate_functional: rate,
        tube_metric: "sup over grid times of the l-infinity distance (surrogate for the weak-* topology)".into(),
        tolerance: RATE_ESTIMATE_TOL,
        rows,
        replicas,
    })
}

impl ExperimentReport {
    /// Per-replica CSV: `n,replica,tilted,hit,max_distance,g,log_weight`.
    pub fn replicas_csv(&self) -> String {
        let mut out = String::from("n,replica,tilted,hit,max_distance,g,log_weight\n");
        for r in &self.replicas {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.n, r.replica, r.tilted as u8, r.hit as u8, r.max_distance, r.g, r.log_weight
            ));
        }
        out
    }
}
