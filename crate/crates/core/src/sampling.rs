//! Seeded random inputs: interior simplex points, zero-sum vectors and
//! generators. Every draw comes from a counter-based stream keyed by
//! `(seed, stream)`, so results do not depend on evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::Result;
use crate::markov::{GeneratorMatrix, SimplexPoint};

/// Default interior floor for sampled probability vectors.
pub const SAMPLE_FLOOR: f64 = 1e-6;

/// Independent stream `stream` of the master `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Symmetric Dirichlet(1) draw, projected to the interior floor.
pub fn random_interior_point<R: Rng + ?Sized>(rng: &mut R, dim: usize, floor: f64) -> Result<SimplexPoint> {
    let draws: Vec<f64> = (0..dim).map(|_| Exp1.sample(rng)).collect();
    SimplexPoint::normalized(draws)?.projected_to_interior(floor)
}

/// Standard normal entries projected to zero sum, then scaled.
pub fn random_zero_sum<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let mean = v.iter().sum::<f64>() / dim as f64;
    v.iter().map(|x| scale * (x - mean)).collect()
}

/// Random zero-sum direction with Euclidean norm `norm`.
pub fn random_zero_sum_with_norm<R: Rng + ?Sized>(rng: &mut R, dim: usize, norm: f64) -> Vec<f64> {
    loop {
        let v = random_zero_sum(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.iter().map(|x| norm * x / n).collect();
        }
    }
}

/// Complete-graph generator satisfying `pi_i Q_ij = pi_j Q_ji` by
/// construction: symmetric conductances divided by a random `pi`.
pub fn random_reversible_generator(dim: usize, seed: u64) -> Result<(GeneratorMatrix, SimplexPoint)> {
    let mut rng = stream_rng(seed, 0);
    let raw: Vec<f64> = (0..dim).map(|_| Exp1.sample(&mut rng)).collect();
    let total: f64 = raw.iter().sum();
    // Mixing with the uniform law keeps rates within a moderate range.
    let pi = SimplexPoint::normalized(raw.iter().map(|v| 0.5 * v / total + 0.5 / dim as f64).collect())?;
    let mut rows = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        for j in i + 1..dim {
            let c: f64 = rng.random_range(0.05..0.5) / dim as f64;
            rows[i][j] = c / pi[i];
            rows[j][i] = c / pi[j];
        }
    }
    for (i, row) in rows.iter_mut().enumerate() {
        row[i] = -row.iter().sum::<f64>();
    }
    Ok((GeneratorMatrix::new(rows)?, pi))
}

/// Complete-graph generator with independent rates; generically not
/// reversible.
pub fn random_generator(dim: usize, seed: u64) -> Result<GeneratorMatrix> {
    let mut rng = stream_rng(seed, 0);
    let mut rows = vec![vec![0.0; dim]; dim];
    for (i, row) in rows.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                *v = rng.random_range(0.1..2.0);
            }
        }
        row[i] = -row.iter().sum::<f64>();
    }
    GeneratorMatrix::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::analyze_balance;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream_rng(7, 3).random()).collect();
        let b: Vec<u64> = (0..4).map(|_| stream_rng(7, 3).random()).collect();
        assert_eq!(a, b);
        let c: u64 = stream_rng(7, 4).random();
        assert_ne!(a[0], c);
    }

    #[test]
    fn sampled_points_are_interior() {
        let mut rng = stream_rng(1, 0);
        for _ in 0..100 {
            let p = random_interior_point(&mut rng, 5, SAMPLE_FLOOR).unwrap();
            assert!(p.is_interior(SAMPLE_FLOOR * (1.0 - 1e-12)));
            let s = random_zero_sum(&mut rng, 5, 0.3);
            assert!(s.iter().sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn constructed_generators() {
        for seed in 0..10 {
            let (q, pi) = random_reversible_generator(5, seed).unwrap();
            let r = analyze_balance(&q, None).unwrap();
            assert!(r.detailed_balance);
            for (a, b) in r.invariant_measure.iter().zip(pi.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            let q = random_generator(4, seed).unwrap();
            assert!(!analyze_balance(&q, None).unwrap().detailed_balance);
        }
    }
}
