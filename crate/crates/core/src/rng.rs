//! Small sampling helpers on top of a seeded RNG.

use rand::rngs::StdRng;
use rand::Rng;

/// Standard normal draw via Box-Muller.
pub fn standard_normal(rng: &mut StdRng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

/// Normal draw truncated to two standard deviations, as used for weight
/// initialization; out-of-range samples are redrawn.
pub fn truncated_normal(rng: &mut StdRng, std: f64) -> f64 {
    loop {
        let z = standard_normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
