//! Halton low-discrepancy points with a Cranley–Patterson random shift.

use rand::Rng;

/// First `n` primes.
fn primes(n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    let mut c = 2u64;
    while out.len() < n {
        if out.iter().take_while(|&&p| p * p <= c).all(|&p| !c.is_multiple_of(p)) {
            out.push(c);
        }
        c += 1;
    }
    out
}

/// Van der Corput radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += (index % base) as f64 * f;
        index /= base;
        f *= inv;
    }
    r
}

/// Halton sequence in `dim` dimensions, one prime base per coordinate.
///
/// Projections onto leading coordinates are again Halton sequences, so a
/// stage-`t` consumer can read only the first `(t+1)·n_w` coordinates.
#[derive(Debug, Clone)]
pub struct Halton {
    bases: Vec<u64>,
    shift: Vec<f64>,
}

impl Halton {
    pub fn new(dim: usize) -> Self {
        Self {
            bases: primes(dim),
            shift: vec![0.0; dim],
        }
    }

    /// Halton with a uniform random shift applied modulo 1.
    pub fn shifted<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let shift = (0..dim).map(|_| rng.random::<f64>()).collect();
        Self {
            bases: primes(dim),
            shift,
        }
    }

    pub fn dim(&self) -> usize {
        self.bases.len()
    }

    /// Point number `index` (the sequence starts at 1 to skip the origin).
    pub fn point(&self, index: u64, out: &mut [f64]) {
        for (k, (&b, &s)) in self.bases.iter().zip(&self.shift).enumerate() {
            let v = radical_inverse(index + 1, b) + s;
            out[k] = if v >= 1.0 { v - 1.0 } else { v };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_primes() {
        assert_eq!(primes(6), vec![2, 3, 5, 7, 11, 13]);
    }

    #[test]
    fn van_der_corput_base2() {
        let v: Vec<f64> = (1..8).map(|i| radical_inverse(i, 2)).collect();
        assert_eq!(v, vec![0.5, 0.25, 0.75, 0.125, 0.625, 0.375, 0.875]);
    }

    #[test]
    fn unshifted_points_start_at_one() {
        let h = Halton::new(2);
        let mut p = [0.0; 2];
        h.point(0, &mut p);
        assert_eq!(p, [0.5, 1.0 / 3.0]);
    }

    #[test]
    fn points_stay_in_unit_cube() {
        let mut rng = crate::seed::SeedPlan::new(1).stream(crate::seed::Purpose::Custom(0), 0);
        let h = Halton::shifted(5, &mut rng);
        let mut p = [0.0; 5];
        for i in 0..5000 {
            h.point(i, &mut p);
            assert!(p.iter().all(|&v| (0.0..1.0).contains(&v)));
        }
    }
}
