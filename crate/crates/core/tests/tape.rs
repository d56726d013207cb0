//! Autodiff engine tests: pinned analytic values for the simple ops and a
//! central-difference oracle over every differentiable primitive.

mod common;

use common::{check_grads, draw};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use saasr_core::tensor::{Tape, Tensor};

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.input(&[1, 2], &[0.0, 0.0], false).unwrap();
    let s = tape.softmax(x, 1).unwrap();
    assert_eq!(tape.value(s), &[0.5, 0.5]);
}

#[test]
fn softmax_matches_analytic_ratio() {
    let mut tape = Tape::new();
    let x = tape.input(&[1, 2], &[2.0f64.ln(), 0.0], false).unwrap();
    let s = tape.softmax(x, 1).unwrap();
    let v = tape.value(s);
    assert!((v[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((v[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = StdRng::seed_from_u64(3);
    let data = draw(&mut rng, 20, false);
    let mut tape = Tape::new();
    let x = tape.input(&[4, 5], &data, false).unwrap();
    let s = tape.softmax(x, 1).unwrap();
    for r in 0..4 {
        let sum: f64 = tape.value(s)[r * 5..(r + 1) * 5].iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "row {r} sums to {sum}");
        assert!(tape.value(s)[r * 5..(r + 1) * 5].iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn softmax_column_axis_normalizes_columns() {
    let mut tape = Tape::new();
    let x = tape.input(&[2, 3], &[1.0, 5.0, -2.0, 1.0, -1.0, 0.5], false).unwrap();
    let s = tape.softmax(x, 0).unwrap();
    for c in 0..3 {
        let sum = tape.value(s)[c] + tape.value(s)[3 + c];
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut tape = Tape::new();
    let x = tape.input(&[2, 3], &[0.0; 6], false).unwrap();
    assert!(tape.softmax(x, 2).is_err());
}

#[test]
fn masked_softmax_gives_exact_zero_to_masked_entries() {
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..50 {
        let data = draw(&mut rng, 12, false);
        let mask: Vec<bool> = (0..12).map(|i| i % 4 != 0 || rng.gen()).collect();
        let mask: Vec<bool> = (0..3)
            .flat_map(|r| {
                // Guarantee at least one open entry per row.
                let mut row = mask[r * 4..(r + 1) * 4].to_vec();
                if row.iter().all(|&m| !m) {
                    row[0] = true;
                }
                row
            })
            .collect();
        let mut tape = Tape::new();
        let x = tape.input(&[3, 4], &data, false).unwrap();
        let s = tape.softmax_rows_masked(x, &mask).unwrap();
        for (i, (&v, &m)) in tape.value(s).iter().zip(&mask).enumerate() {
            if !m {
                assert_eq!(v.to_bits(), 0.0f64.to_bits(), "masked entry {i} must be exactly 0");
            }
        }
        for r in 0..3 {
            let sum: f64 = tape.value(s)[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn masked_softmax_rejects_fully_masked_row() {
    let mut tape = Tape::new();
    let x = tape.input(&[2, 2], &[0.0; 4], false).unwrap();
    assert!(tape.softmax_rows_masked(x, &[true, true, false, false]).is_err());
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.input(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true).unwrap();
    let s = tape.sum_all(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_ignores_unused_parameters() {
    let mut tape = Tape::new();
    let x = tape.input(&[1, 2], &[1.0, 2.0], true).unwrap();
    let p = tape.input(&[1, 2], &[5.0, 5.0], true).unwrap();
    let s = tape.sum_all(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(p).map_or(true, |g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.input(&[2, 2], &[0.0; 4], true).unwrap();
    assert!(tape.backward(x).is_err());
}

#[test]
fn zero_grads_resets_between_passes() {
    let mut tape = Tape::new();
    let x = tape.input(&[1, 2], &[1.0, 2.0], true).unwrap();
    let s = tape.sum_all(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    tape.zero_grads();
    assert!(tape.grad(x).map_or(true, |g| g.iter().all(|&v| v == 0.0)));
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = StdRng::seed_from_u64(17);
        let data = draw(&mut rng, 12, false);
        let mut tape = Tape::new();
        let x = tape.input(&[3, 4], &data, true).unwrap();
        let s = tape.softmax(x, 1).unwrap();
        let e = tape.exp(s);
        let l = tape.sum_all(e);
        tape.backward(l).unwrap();
        tape.grad(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn depthwise_identity_kernel_is_identity() {
    let mut rng = StdRng::seed_from_u64(5);
    let data = draw(&mut rng, 18, false);
    let mut tape = Tape::new();
    let x = tape.input(&[6, 3], &data, false).unwrap();
    // Kernel 3, center tap 1: convolution leaves the input untouched.
    let w = tape.input(&[3, 3], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0], false).unwrap();
    let b = tape.input(&[1, 3], &[0.0; 3], false).unwrap();
    let y = tape.depthwise_conv1d(x, w, b).unwrap();
    assert_eq!(tape.value(y), data.as_slice());
}

#[test]
fn depthwise_matches_nested_loop_oracle() {
    let mut rng = StdRng::seed_from_u64(23);
    let (t, c, k) = (7, 3, 3);
    let x = draw(&mut rng, t * c, false);
    let w = draw(&mut rng, k * c, false);
    let b = draw(&mut rng, c, false);
    let mut tape = Tape::new();
    let xv = tape.input(&[t, c], &x, false).unwrap();
    let wv = tape.input(&[k, c], &w, false).unwrap();
    let bv = tape.input(&[1, c], &b, false).unwrap();
    let y = tape.depthwise_conv1d(xv, wv, bv).unwrap();
    let pad = (k - 1) / 2;
    for ti in 0..t {
        for ci in 0..c {
            let mut expect = b[ci];
            for j in 0..k {
                let src = ti as isize + j as isize - pad as isize;
                if (0..t as isize).contains(&src) {
                    expect += w[j * c + ci] * x[src as usize * c + ci];
                }
            }
            let got = tape.value(y)[ti * c + ci];
            assert!((got - expect).abs() < 1e-10, "({ti},{ci}): {got} vs {expect}");
        }
    }
}

#[test]
fn unfold_stride_two_halves_length() {
    let mut tape = Tape::new();
    let x = tape.input(&[5, 2], &[0.0; 10], false).unwrap();
    let u = tape.unfold1d(x, 3, 2).unwrap();
    assert_eq!(tape.shape(u), &[3, 6]);
}

#[test]
fn normalize_rows_unit_norm_and_zero_guard() {
    let mut tape = Tape::new();
    let x = tape.input(&[2, 3], &[3.0, 0.0, 4.0, 0.0, 0.0, 0.0], false).unwrap();
    let n = tape.normalize_rows(x).unwrap();
    let v = tape.value(n);
    assert!((v[0] - 0.6).abs() < 1e-12 && (v[2] - 0.8).abs() < 1e-12);
    assert_eq!(&v[3..], &[0.0, 0.0, 0.0], "zero rows must map to zero, not NaN");
}

#[test]
fn layer_norm_of_constant_row_returns_bias() {
    let mut tape = Tape::new();
    let x = tape.input(&[1, 4], &[7.0; 4], false).unwrap();
    let g = tape.input(&[1, 4], &[2.0; 4], false).unwrap();
    let b = tape.input(&[1, 4], &[0.5, -0.5, 1.0, 0.0], false).unwrap();
    let y = tape.layer_norm(x, g, b).unwrap();
    for (got, want) in tape.value(y).iter().zip([0.5, -0.5, 1.0, 0.0]) {
        assert!((got - want).abs() < 1e-6);
    }
}

#[test]
fn embed_rows_accumulates_repeated_ids() {
    let mut tape = Tape::new();
    let table = tape.input(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true).unwrap();
    let e = tape.embed_rows(table, &[1, 1, 2]).unwrap();
    assert_eq!(tape.value(e), &[3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
    let s = tape.sum_all(e);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
}

#[test]
fn dropout_rate_zero_is_identity() {
    let mut rng = StdRng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.input(&[2, 3], &[1.0, -2.0, 3.0, -4.0, 5.0, -6.0], false).unwrap();
    let y = tape.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn dropout_zeroes_or_rescales_and_is_seeded() {
    let rate = 0.4;
    let keep = 1.0 / (1.0 - rate);
    let run = |seed: u64| {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.input(&[10, 10], &[1.0; 100], true).unwrap();
        let y = tape.dropout(x, rate, &mut rng).unwrap();
        let values = tape.value(y).to_vec();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        (values, tape.grad(x).unwrap().to_vec())
    };
    let (v1, g1) = run(9);
    let (v2, _) = run(9);
    assert_eq!(v1, v2, "same seed must mask identically");
    for (&v, &g) in v1.iter().zip(&g1) {
        assert!(v == 0.0 || (v - keep).abs() < 1e-12);
        assert!(g == 0.0 || (g - keep).abs() < 1e-12, "gradient passes the same mask");
    }
    let dropped = v1.iter().filter(|&&v| v == 0.0).count();
    assert!((20..=60).contains(&dropped), "dropped {dropped} of 100 at rate 0.4");
}

#[test]
fn dropout_rejects_rate_one() {
    let mut rng = StdRng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.input(&[1, 2], &[1.0, 2.0], false).unwrap();
    assert!(tape.dropout(x, 1.0, &mut rng).is_err());
}

#[test]
fn tensor_rejects_shape_data_mismatch() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
}

#[test]
fn tensor_flags_non_finite_values() {
    let t = Tensor::new(vec![1, 2], vec![1.0, f64::NAN]).unwrap();
    assert!(t.check_finite("probe").is_err());
    let ok = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    assert!(ok.check_finite("probe").is_ok());
}

#[test]
fn matmul_matches_hand_product() {
    let mut tape = Tape::new();
    let a = tape.input(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false).unwrap();
    let b = tape.input(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0], false).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[58.0, 64.0, 139.0, 154.0]);

    let bt = tape.input(&[2, 3], &[7.0, 9.0, 11.0, 8.0, 10.0, 12.0], false).unwrap();
    let c2 = tape.matmul_nt(a, bt).unwrap();
    assert_eq!(tape.value(c2), &[58.0, 64.0, 139.0, 154.0]);
}

#[test]
fn matmul_rejects_inner_dim_mismatch() {
    let mut tape = Tape::new();
    let a = tape.input(&[2, 3], &[0.0; 6], false).unwrap();
    let b = tape.input(&[2, 2], &[0.0; 4], false).unwrap();
    assert!(tape.matmul(a, b).is_err());
}

// Central-difference oracle over every differentiable primitive.

#[test]
fn grad_add_sub_mul() {
    check_grads(&[&[3, 4], &[3, 4]], &[false, false], &|t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let s = t.sub(a, v[1]).unwrap();
        t.mul(s, v[0]).unwrap()
    });
}

#[test]
fn grad_row_broadcasts() {
    check_grads(&[&[3, 4], &[1, 4]], &[false, false], &|t, v| {
        let a = t.add_row(v[0], v[1]).unwrap();
        t.mul_row(a, v[1]).unwrap()
    });
}

#[test]
fn grad_scale() {
    check_grads(&[&[2, 3]], &[false], &|t, v| t.scale(v[0], -1.7));
}

#[test]
fn grad_matmul_both_orientations() {
    check_grads(&[&[3, 4], &[4, 2]], &[false, false], &|t, v| t.matmul(v[0], v[1]).unwrap());
    check_grads(&[&[3, 4], &[2, 4]], &[false, false], &|t, v| t.matmul_nt(v[0], v[1]).unwrap());
}

#[test]
fn grad_pointwise_nonlinearities() {
    check_grads(&[&[2, 4]], &[false], &|t, v| t.exp(v[0]));
    check_grads(&[&[2, 4]], &[true], &|t, v| t.ln(v[0]));
    check_grads(&[&[2, 4]], &[false], &|t, v| t.sigmoid(v[0]));
    check_grads(&[&[2, 4]], &[false], &|t, v| t.swish(v[0]));
}

#[test]
fn grad_softmax_all_variants() {
    check_grads(&[&[3, 4]], &[false], &|t, v| t.softmax(v[0], 1).unwrap());
    check_grads(&[&[3, 4]], &[false], &|t, v| t.softmax(v[0], 0).unwrap());
    check_grads(&[&[3, 4]], &[false], &|t, v| t.log_softmax_rows(v[0]).unwrap());
    let mask = [
        true, false, false, false, //
        true, true, false, false, //
        true, true, true, true,
    ];
    check_grads(&[&[3, 4]], &[false], &move |t, v| {
        t.softmax_rows_masked(v[0], &mask).unwrap()
    });
}

#[test]
fn grad_layer_norm() {
    check_grads(&[&[3, 4], &[1, 4], &[1, 4]], &[false, false, false], &|t, v| {
        t.layer_norm(v[0], v[1], v[2]).unwrap()
    });
}

#[test]
fn grad_reductions_and_slices() {
    check_grads(&[&[3, 4]], &[false], &|t, v| t.mean_rows(v[0]).unwrap());
    check_grads(&[&[3, 4]], &[false], &|t, v| t.slice_rows(v[0], 1, 2).unwrap());
    check_grads(&[&[3, 4]], &[false], &|t, v| t.slice_cols(v[0], 1, 3).unwrap());
    check_grads(&[&[3, 2], &[3, 3]], &[false, false], &|t, v| {
        t.concat_cols(&[v[0], v[1]]).unwrap()
    });
}

#[test]
fn grad_lookup_ops() {
    check_grads(&[&[4, 3]], &[false], &|t, v| t.embed_rows(v[0], &[2, 0, 2]).unwrap());
    check_grads(&[&[3, 4]], &[false], &|t, v| t.gather_row_cols(v[0], &[1, 3, 0]).unwrap());
}

#[test]
fn grad_convolution_ops() {
    check_grads(&[&[6, 3]], &[false], &|t, v| t.unfold1d(v[0], 3, 2).unwrap());
    check_grads(&[&[6, 3], &[3, 3], &[1, 3]], &[false, false, false], &|t, v| {
        t.depthwise_conv1d(v[0], v[1], v[2]).unwrap()
    });
}

#[test]
fn grad_normalize_rows() {
    check_grads(&[&[3, 4]], &[true], &|t, v| t.normalize_rows(v[0]).unwrap());
}

#[test]
fn grad_composite_graph() {
    // A deliberately tangled graph reusing intermediates, mirroring how the
    // model shares encoder states across decoder steps.
    check_grads(&[&[3, 4], &[4, 4]], &[false, false], &|t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let s = t.softmax(h, 1).unwrap();
        let w = t.swish(h);
        let m = t.mul(s, w).unwrap();
        let n = t.normalize_rows(m).unwrap();
        t.add(n, s).unwrap()
    });
}
