//! Shared helpers for the integration test suites.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use saasr_core::tensor::gradcheck::{central_difference, relative_error};
use saasr_core::tensor::{Tape, Var};

pub const GRAD_TOL: f64 = 1e-4;

/// Draws input data; `positive` selects a range safe for `ln`.
pub fn draw(rng: &mut StdRng, n: usize, positive: bool) -> Vec<f64> {
    (0..n)
        .map(|_| if positive { rng.gen_range(0.3..2.5) } else { rng.gen_range(-2.0..2.0) })
        .collect()
}

/// Reduces `v` to a scalar through fixed, sign-varied weights so gradient
/// errors cannot cancel the way they could under a plain sum.
pub fn scalarize(tape: &mut Tape, v: Var) -> Var {
    let n = tape.value(v).len();
    let weights: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0).sin() + 0.1).collect();
    let w = tape.input(tape.shape(v).to_vec().as_slice(), &weights, false).unwrap();
    let prod = tape.mul(v, w).unwrap();
    tape.sum_all(prod)
}

/// Checks analytic gradients of `build` (inputs -> any tensor) against
/// central differences at every coordinate of every input, over 20 seeds.
pub fn check_grads(
    shapes: &[&[usize]],
    positive: &[bool],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) {
    check_grads_seeds(shapes, positive, 20, build);
}

/// As [`check_grads`] with a caller-chosen seed count, for larger graphs.
pub fn check_grads_seeds(
    shapes: &[&[usize]],
    positive: &[bool],
    seeds: u64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) {
    for seed in 0..seeds {
        let mut rng = StdRng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = shapes
            .iter()
            .zip(positive)
            .map(|(s, &p)| draw(&mut rng, s.iter().product(), p))
            .collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(&data)
            .map(|(s, d)| tape.input(s, d, true).unwrap())
            .collect();
        let out = build(&mut tape, &vars);
        let loss = scalarize(&mut tape, out);
        tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> =
            vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();

        for (which, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            for coord in 0..n {
                let numeric = central_difference(
                    |v| {
                        let mut patched = data.clone();
                        patched[which][coord] = v;
                        let mut t = Tape::new();
                        let vs: Vec<Var> = shapes
                            .iter()
                            .zip(&patched)
                            .map(|(s, d)| t.input(s, d, false).unwrap())
                            .collect();
                        let out = build(&mut t, &vs);
                        let l = scalarize(&mut t, out);
                        Ok(t.value(l)[0])
                    },
                    data[which][coord],
                    1e-5,
                )
                .unwrap();
                let a = if analytic[which].is_empty() { 0.0 } else { analytic[which][coord] };
                if (a - numeric).abs() < 1e-9 {
                    continue; // below central-difference roundoff; relative error is meaningless
                }
                let err = relative_error(a, numeric);
                assert!(
                    err < GRAD_TOL,
                    "seed {seed}, input {which}, coord {coord}: analytic {a} vs numeric {numeric} (rel {err})"
                );
            }
        }
    }
}
