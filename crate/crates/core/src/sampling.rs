//! Deterministic sample sets used by the sampled certificates.

const PRIMES: [u32; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % b) as f64 * f;
        i /= b;
        f *= inv;
    }
    r
}

/// Halton points in the unit cube `[0,1)^d`, skipping the origin.
pub fn halton(d: usize, count: usize) -> Vec<Vec<f64>> {
    assert!(d <= PRIMES.len(), "halton dimension too large");
    (1..=count as u64)
        .map(|i| (0..d).map(|k| radical_inverse(i, PRIMES[k])).collect())
        .collect()
}

/// A point `(t, q, w)` of the extended phase or tangent space.
#[derive(Clone, Debug)]
pub struct FiberSample {
    pub t: f64,
    pub q: Vec<f64>,
    pub w: Vec<f64>,
}

/// Samples with `t ∈ [-1/2, 1/2)`, `q` in the fundamental domain scaled by
/// `periods`, and `w ∈ [-wmax, wmax)^N`.
pub fn fiber_samples(periods: &[f64], wmax: f64, count: usize) -> Vec<FiberSample> {
    let n = periods.len();
    halton(1 + 2 * n, count)
        .into_iter()
        .map(|u| FiberSample {
            t: u[0] - 0.5,
            q: (0..n).map(|i| u[1 + i] * periods[i]).collect(),
            w: (0..n).map(|i| (2.0 * u[1 + n + i] - 1.0) * wmax).collect(),
        })
        .collect()
}

/// Unit directions: `±1` in one dimension, evenly spaced angles in two,
/// Halton points on the sphere otherwise.
pub fn unit_directions(dim: usize, count: usize) -> Vec<Vec<f64>> {
    match dim {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..count.max(4))
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / count.max(4) as f64;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => halton(dim, count)
            .into_iter()
            .filter_map(|u| {
                let x: Vec<f64> = u.iter().map(|s| 2.0 * s - 1.0).collect();
                let r = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                (r > 1e-3).then(|| x.iter().map(|a| a / r).collect())
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halton_is_deterministic_and_in_range() {
        let a = halton(3, 100);
        let b = halton(3, 100);
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|x| (0.0..1.0).contains(x)));
        assert_eq!(a[0], vec![0.5, 1.0 / 3.0, 0.2]);
    }

    #[test]
    fn directions_are_unit() {
        for d in 1..4 {
            for u in unit_directions(d, 16) {
                let r: f64 = u.iter().map(|a| a * a).sum();
                assert!((r - 1.0).abs() < 1e-14);
            }
        }
    }
}
