//! Operation-level oracles for the tensor engine: hand-computed forward
//! values, loop-oracle equivalence for grouped convolution, and central
//! finite-difference checks for every differentiable op.

use gcanet::tensor::kernels::{self, ConvSpec};
use gcanet::tensor::{grad_check, GradGraph, Shape4, Tensor4};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Deterministic pseudo-random filler in [-1, 1], kept away from zero so no
/// probe lands on an activation kink.
fn wiggle(shape: Shape4, salt: u64) -> Tensor4<f64> {
    let mut state = salt.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    Tensor4::from_fn(shape, |_, _, _, _| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let u = ((state >> 11) as f64) / ((1u64 << 53) as f64);
        let v = 2.0 * u - 1.0;
        if v.abs() < 1e-3 {
            v + 0.01
        } else {
            v
        }
    })
}

// -- matmul -----------------------------------------------------------------

#[test]
fn matmul_identity() {
    let mut g = GradGraph::<f64>::new();
    let i = g.leaf(Tensor4::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.leaf(Tensor4::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_hand_product() {
    // [[1,2]] * [[3],[4]] = [[11]]
    let mut g = GradGraph::<f64>::new();
    let a = g.leaf(Tensor4::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = g.leaf(Tensor4::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = GradGraph::<f64>::new();
    let a = g.leaf(Tensor4::zeros(Shape4::matrix(2, 3)));
    let b = g.leaf(Tensor4::zeros(Shape4::matrix(4, 2)));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("1x1x2x3") && err.contains("1x1x4x2"), "{err}");
}

// -- conv2d -------------------------------------------------------------------

#[test]
fn conv2d_zero_kernel_gives_zero_output() {
    let mut g = GradGraph::<f64>::new();
    let x = g.leaf(wiggle(Shape4::new(1, 1, 4, 4), 3));
    let w = g.leaf(Tensor4::zeros(Shape4::new(1, 1, 3, 3)));
    let y = g.conv2d_same(x, w, 1, 1, 1).unwrap();
    assert_eq!(g.value(y).shape(), Shape4::new(1, 1, 4, 4));
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_all_ones_center_is_nine() {
    let mut g = GradGraph::<f64>::new();
    let x = g.leaf(Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0));
    let w = g.leaf(Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0));
    let y = g.conv2d_same(x, w, 1, 1, 1).unwrap();
    assert_eq!(g.value(y).at(0, 0, 1, 1), 9.0);
    // Corners see a 2x2 patch under same padding.
    assert_eq!(g.value(y).at(0, 0, 0, 0), 4.0);
}

#[test]
fn conv2d_stride_two_halves_spatial_size() {
    let mut g = GradGraph::<f64>::new();
    let x = g.leaf(wiggle(Shape4::new(1, 1, 4, 4), 4));
    let w = g.leaf(wiggle(Shape4::new(1, 1, 3, 3), 5));
    let y = g.conv2d_same(x, w, 2, 1, 1).unwrap();
    assert_eq!(g.value(y).shape(), Shape4::new(1, 1, 2, 2));
}

#[test]
fn conv2d_invalid_groups_is_shape_error() {
    let mut g = GradGraph::<f64>::new();
    let x = g.leaf(Tensor4::zeros(Shape4::new(1, 4, 4, 4)));
    let w = g.leaf(Tensor4::zeros(Shape4::new(4, 2, 3, 3)));
    assert!(g.conv2d_same(x, w, 1, 1, 3).is_err());
}

/// Depthwise conv must equal a per-channel 2-D convolution computed by an
/// independent loop oracle, bitwise (same summation order).
#[test]
fn conv2d_depthwise_matches_loop_oracle_exactly() {
    let channels = 3;
    let x = wiggle(Shape4::new(2, channels, 5, 5), 6);
    let w = wiggle(Shape4::new(channels, 1, 3, 3), 7);
    let spec = ConvSpec {
        stride: 1,
        dilation: 1,
        groups: channels,
        pad: 1,
    };
    let got = kernels::conv2d(&x, &w, &spec).unwrap();

    let mut want = Tensor4::zeros(Shape4::new(2, channels, 5, 5));
    for b in 0..2 {
        for c in 0..channels {
            for oy in 0..5i64 {
                for ox in 0..5i64 {
                    let mut acc = 0.0;
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let iy = oy + ky - 1;
                            let ix = ox + kx - 1;
                            if iy < 0 || iy >= 5 || ix < 0 || ix >= 5 {
                                continue;
                            }
                            acc += x.at(b, c, iy as usize, ix as usize)
                                * w.at(c, 0, ky as usize, kx as usize);
                        }
                    }
                    want.set(b, c, oy as usize, ox as usize, acc);
                }
            }
        }
    }
    assert_eq!(got.data(), want.data());
}

// -- elementwise suite --------------------------------------------------------

#[test]
fn softmax_of_uniform_is_uniform() {
    let mut g = GradGraph::<f64>::new();
    let x = g.leaf(Tensor4::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap());
    let y = g.softmax(x, 3).unwrap();
    for &v in g.value(y).data() {
        assert!(close(v, 1.0 / 3.0, 1e-12));
    }
}

#[test]
fn l2_normalize_three_four_five() {
    let mut g = GradGraph::<f64>::new();
    let x = g.leaf(Tensor4::matrix(1, 2, vec![3.0, 4.0]).unwrap());
    let y = g.l2_normalize(x, 3, 1e-12).unwrap();
    assert!(close(g.value(y).data()[0], 0.6, 1e-9));
    assert!(close(g.value(y).data()[1], 0.8, 1e-9));
}

#[test]
fn l2_normalize_zero_vector_stays_zero() {
    let mut g = GradGraph::<f64>::new();
    let x = g.leaf(Tensor4::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap());
    let y = g.l2_normalize(x, 3, 1e-12).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_of_negative_is_zero() {
    let mut g = GradGraph::<f64>::new();
    let x = g.leaf(Tensor4::scalar(-2.0));
    let y = g.relu(x);
    assert_eq!(g.value(y).data()[0], 0.0);
}

#[test]
fn broadcast_rejects_incompatible_shapes() {
    let mut g = GradGraph::<f64>::new();
    let a = g.leaf(Tensor4::zeros(Shape4::new(1, 2, 3, 3)));
    let b = g.leaf(Tensor4::zeros(Shape4::new(1, 3, 3, 3)));
    assert!(g.add(a, b).is_err());
}

// -- pooling / resampling -----------------------------------------------------

#[test]
fn gap_of_constant_map_is_the_constant() {
    let mut g = GradGraph::<f64>::new();
    let x = g.leaf(Tensor4::full(Shape4::new(1, 3, 5, 5), 2.5));
    let y = g.global_avg_pool(x);
    assert_eq!(g.value(y).shape(), Shape4::new(1, 3, 1, 1));
    for &v in g.value(y).data() {
        assert!(close(v, 2.5, 1e-12));
    }
}

#[test]
fn gap_is_arithmetic_mean() {
    let mut g = GradGraph::<f64>::new();
    let x = g.leaf(Tensor4::new(Shape4::new(1, 1, 2, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap());
    let y = g.global_avg_pool(x);
    assert_eq!(g.value(y).data()[0], 4.0);
}

#[test]
fn bilinear_of_constant_map_is_constant() {
    let mut g = GradGraph::<f64>::new();
    let x = g.leaf(Tensor4::full(Shape4::new(1, 2, 3, 3), 0.7));
    let y = g.bilinear_resize(x, 8, 5).unwrap();
    assert_eq!(g.value(y).shape(), Shape4::new(1, 2, 8, 5));
    for &v in g.value(y).data() {
        assert!(close(v, 0.7, 1e-12));
    }
}

#[test]
fn avg_pool_requires_divisible_size() {
    let mut g = GradGraph::<f64>::new();
    let x = g.leaf(Tensor4::zeros(Shape4::new(1, 1, 5, 5)));
    assert!(g.avg_pool(x, 2).is_err());
    let x = g.leaf(Tensor4::new(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.avg_pool(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);
}

// -- layout moves ---------------------------------------------------------------

#[test]
fn tokens_roundtrip_is_identity() {
    let x = wiggle(Shape4::new(2, 3, 2, 2), 8);
    let tok = kernels::map_to_tokens(&x);
    assert_eq!(tok.shape(), Shape4::new(2, 1, 4, 3));
    // Token row t holds the channel vector at spatial position t.
    assert_eq!(tok.at(1, 0, 2, 1), x.at(1, 1, 1, 0));
    let back = kernels::tokens_to_map(&tok, 3, 2, 2).unwrap();
    assert_eq!(back.data(), x.data());
}

#[test]
fn head_split_roundtrip_is_identity() {
    let x = wiggle(Shape4::new(2, 1, 5, 6), 9);
    let split = kernels::split_heads(&x, 3).unwrap();
    assert_eq!(split.shape(), Shape4::new(2, 3, 5, 2));
    // Head h gets the contiguous channel block [h*2, h*2+2).
    assert_eq!(split.at(0, 1, 4, 0), x.at(0, 0, 4, 2));
    let merged = kernels::merge_heads(&split);
    assert_eq!(merged.data(), x.data());
}

// -- determinism -----------------------------------------------------------------

/// Recording on vs off must produce bitwise-identical forward values, and two
/// identical runs must agree bit for bit.
#[test]
fn forward_is_bitwise_deterministic_and_recording_invariant() {
    let run = |recording: bool| -> Vec<u64> {
        let mut g = if recording {
            GradGraph::<f64>::new()
        } else {
            GradGraph::<f64>::inference()
        };
        let x = g.leaf(wiggle(Shape4::new(1, 4, 6, 6), 11));
        let w = g.leaf(wiggle(Shape4::new(4, 4, 3, 3), 12));
        let c = g.conv2d_same(x, w, 2, 1, 1).unwrap();
        let r = g.relu(c);
        let t = g.map_to_tokens(r);
        let n = g.l2_normalize(t, 2, 1e-12).unwrap();
        let s = g.softmax(n, 3).unwrap();
        g.value(s).data().iter().map(|v| v.to_bits()).collect()
    };
    let a = run(true);
    assert_eq!(a, run(true));
    assert_eq!(a, run(false));
}

// -- gradient checker itself ----------------------------------------------------

#[test]
fn grad_check_sum_of_squares() {
    // f(x) = sum(x^2), x = [1, 2]: analytic gradient [2, 4].
    let probe = Tensor4::matrix(1, 2, vec![1.0, 2.0]).unwrap();
    let mut g = GradGraph::<f64>::new();
    let x = g.leaf(probe.clone());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum_all(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);

    let err = grad_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.sum_all(sq))
        },
        &probe,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "relative error {err}");
}

#[test]
fn grad_check_constant_function_is_exact() {
    let probe = Tensor4::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap();
    let err = grad_check(
        |g, x| {
            let zero = g.mul_scalar(x, 0.0);
            Ok(g.sum_all(zero))
        },
        &probe,
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_excludes_relu_kink_at_zero() {
    // Probing relu exactly at 0 would compare one-sided derivatives; the
    // checker's kink policy drops such entries, so the check passes cleanly.
    let probe = Tensor4::matrix(1, 3, vec![0.0, 1.0, -1.0]).unwrap();
    let err = grad_check(
        |g, x| {
            let r = g.relu(x);
            Ok(g.sum_all(r))
        },
        &probe,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "relative error {err}");
}

#[test]
fn grad_check_reports_non_finite_node() {
    let probe = Tensor4::scalar(-1.0);
    let err = grad_check(
        |g, x| {
            let l = g.ln(x); // ln of a negative number
            Ok(g.sum_all(l))
        },
        &probe,
        1e-5,
    )
    .unwrap_err();
    assert!(err.to_string().contains("ln"), "{err}");
}

// -- per-op gradient checks ------------------------------------------------------

/// Every differentiable op on random small shapes: max relative error < 1e-5
/// at step 1e-5 in f64.
#[test]
fn gradients_of_every_op_match_finite_differences() {
    let tol = 1e-5;
    let step = 1e-5;
    let probe = wiggle(Shape4::new(2, 4, 6, 6), 21);
    let aux = wiggle(Shape4::new(2, 4, 6, 6), 22);
    let aux_b = wiggle(Shape4::new(1, 4, 1, 1), 23);

    type Build = Box<
        dyn Fn(
            &mut GradGraph<f64>,
            gcanet::tensor::Var,
        ) -> Result<gcanet::tensor::Var, gcanet::TensorError>,
    >;
    let aux1 = aux.clone();
    let aux2 = aux.clone();
    let aux3 = aux_b.clone();
    let aux4 = aux.clone();
    let cases: Vec<(&str, Build)> = vec![
        ("add", {
            let aux = aux1;
            Box::new(move |g, x| {
                let other = g.leaf(aux.clone());
                let y = g.add(x, other)?;
                Ok(g.sum_all(y))
            })
        }),
        ("sub_mul", {
            let aux = aux2;
            Box::new(move |g, x| {
                let other = g.leaf(aux.clone());
                let d = g.sub(x, other)?;
                let m = g.mul(d, x)?;
                Ok(g.sum_all(m))
            })
        }),
        ("div_broadcast", {
            let aux = aux3;
            Box::new(move |g, x| {
                let denom_raw = g.leaf(aux.clone());
                let sq = g.mul(denom_raw, denom_raw)?;
                let denom = g.add_scalar(sq, 0.5); // keep away from zero
                let y = g.div(x, denom)?;
                Ok(g.sum_all(y))
            })
        }),
        ("scalar_affine", Box::new(|g, x| {
            let y = g.mul_scalar(x, 1.7);
            let z = g.add_scalar(y, 0.3);
            Ok(g.sum_all(z))
        })),
        ("relu", Box::new(|g, x| {
            let y = g.relu(x);
            Ok(g.sum_all(y))
        })),
        ("sigmoid", Box::new(|g, x| {
            let y = g.sigmoid(x);
            Ok(g.sum_all(y))
        })),
        ("ln_of_positive", Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            let pos = g.add_scalar(sq, 0.5);
            let y = g.ln(pos);
            Ok(g.sum_all(y))
        })),
        ("sqrt_of_positive", Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            let pos = g.add_scalar(sq, 0.5);
            let y = g.sqrt(pos);
            Ok(g.sum_all(y))
        })),
        ("softmax", Box::new(|g, x| {
            let s = g.softmax(x, 1)?;
            let w = g.mul(s, x)?;
            Ok(g.sum_all(w))
        })),
        ("l2_normalize", Box::new(|g, x| {
            let n = g.l2_normalize(x, 2, 1e-12)?;
            let w = g.mul(n, x)?;
            Ok(g.sum_all(w))
        })),
        ("sum_axis", Box::new(|g, x| {
            let s = g.sum_axis(x, 1)?;
            let sq = g.mul(s, s)?;
            Ok(g.sum_all(sq))
        })),
        ("mean_all", Box::new(|g, x| {
            let m = g.mean_all(x);
            let sq = g.mul(m, m)?;
            Ok(g.sum_all(sq))
        })),
        ("adaptive_avg_pool", Box::new(|g, x| {
            let p = g.adaptive_avg_pool(x, 3, 2);
            let sq = g.mul(p, p)?;
            Ok(g.sum_all(sq))
        })),
        ("avg_pool", Box::new(|g, x| {
            let p = g.avg_pool(x, 2)?;
            let sq = g.mul(p, p)?;
            Ok(g.sum_all(sq))
        })),
        ("bilinear_up", Box::new(|g, x| {
            let u = g.bilinear_resize(x, 9, 11)?;
            let sq = g.mul(u, u)?;
            Ok(g.sum_all(sq))
        })),
        ("bilinear_down", Box::new(|g, x| {
            let d = g.bilinear_resize(x, 3, 4)?;
            let sq = g.mul(d, d)?;
            Ok(g.sum_all(sq))
        })),
        ("layout_chain", Box::new(|g, x| {
            let t = g.map_to_tokens(x);
            let h = g.split_heads(t, 2)?;
            let tt = g.transpose_last(h);
            let m = g.merge_heads(tt);
            let sq = g.mul(m, m)?;
            Ok(g.sum_all(sq))
        })),
        ("concat_channels", {
            let aux = aux4;
            Box::new(move |g, x| {
                let other = g.leaf(aux.clone());
                let c = g.concat_channels(x, other)?;
                let sq = g.mul(c, c)?;
                Ok(g.sum_all(sq))
            })
        }),
        ("clamp_interior", Box::new(|g, x| {
            let c = g.clamp(x, -10.0, 10.0); // probes stay interior
            let sq = g.mul(c, c)?;
            Ok(g.sum_all(sq))
        })),
    ];
    for (name, build) in &cases {
        let err = grad_check(build.as_ref(), &probe, step).unwrap();
        assert!(err < tol, "{name}: relative error {err}");
    }

    // matmul and conv2d check both operands via dedicated probes.
    let a = wiggle(Shape4::new(2, 3, 4, 5), 31);
    let b = wiggle(Shape4::new(1, 1, 5, 6), 32);
    let b2 = b.clone();
    let err = grad_check(
        move |g, x| {
            let rhs = g.leaf(b2.clone());
            let y = g.matmul(x, rhs)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        },
        &a,
        step,
    )
    .unwrap();
    assert!(err < tol, "matmul wrt lhs: {err}");
    let a2 = a.clone();
    let err = grad_check(
        move |g, x| {
            let lhs = g.leaf(a2.clone());
            let y = g.matmul(lhs, x)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        },
        &b,
        step,
    )
    .unwrap();
    assert!(err < tol, "matmul wrt rhs: {err}");

    let x = wiggle(Shape4::new(2, 4, 6, 6), 33);
    let w = wiggle(Shape4::new(6, 2, 3, 3), 34);
    let w2 = w.clone();
    let err = grad_check(
        move |g, v| {
            let w = g.leaf(w2.clone());
            let y = g.conv2d_same(v, w, 2, 2, 2)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        },
        &x,
        step,
    )
    .unwrap();
    assert!(err < tol, "conv2d wrt input: {err}");
    let x2 = x.clone();
    let err = grad_check(
        move |g, v| {
            let x = g.leaf(x2.clone());
            let y = g.conv2d_same(x, v, 2, 2, 2)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        },
        &w,
        step,
    )
    .unwrap();
    assert!(err < tol, "conv2d wrt weights: {err}");
}
