//! Small random-geometry helpers shared by the samplers.

use rand::Rng;

use crate::scalar::{norm2, Real};

/// Uniform direction on the unit sphere of `R^k` (for `k = 1` a random sign).
pub fn random_unit<T: Real, R: Rng>(k: usize, rng: &mut R) -> Vec<T> {
    if k == 0 {
        return Vec::new();
    }
    loop {
        let v: Vec<T> = (0..k).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
        let n = norm2(&v);
        if n <= T::one() && n > T::lit(1e-3) {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

/// Uniform point in the closed Euclidean ball of radius `radius` in `R^k`.
pub fn random_in_ball<T: Real, R: Rng>(k: usize, radius: T, rng: &mut R) -> Vec<T> {
    let u = random_unit::<T, R>(k, rng);
    let s = T::lit(rng.gen::<f64>()).powf(T::one() / T::from_usize(k.max(1)).unwrap());
    u.into_iter().map(|a| a * s * radius).collect()
}

/// Radius uniform with respect to the volume of shells in `R^dim`
/// between `lo` and `hi`.
pub fn random_radius<T: Real, R: Rng>(lo: T, hi: T, dim: usize, rng: &mut R) -> T {
    let k = T::from_usize(dim.max(1)).unwrap();
    let (a, b) = (lo.powf(k), hi.powf(k));
    let u = T::lit(rng.gen::<f64>());
    (a + (b - a) * u).powf(T::one() / k).max(lo).min(hi)
}
