use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Naive triple-loop product, the independent route for matmul checks.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
    let eye = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let c = g.matmul(a, eye).unwrap();
    assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_zeros_annihilate() {
    let mut g = Graph::new();
    let z = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(&[3, 4], rand_vec(&mut rng(1), 12)).unwrap();
    let c = g.matmul(z, b).unwrap();
    assert_eq!(g.shape(c), &[2, 4]);
    assert!(g.data(c).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(2);
    let a = rand_vec(&mut r, 5 * 7);
    let b = rand_vec(&mut r, 7 * 3);
    let expect = matmul_oracle(&a, &b, 5, 7, 3);
    let mut g = Graph::new();
    let an = g.constant(&[5, 7], a).unwrap();
    let bn = g.constant(&[7, 3], b).unwrap();
    let c = g.matmul(an, bn).unwrap();
    assert!(max_abs_diff(g.data(c), &expect) <= 1e-12);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(&[4, 2], vec![0.0; 8]).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn softmax_symmetry_and_uniformity() {
    let mut g = Graph::new();
    let a = g.constant(&[2], vec![0.0, 0.0]).unwrap();
    let s = g.softmax_rows(a).unwrap();
    assert_eq!(g.data(s), &[0.5, 0.5]);

    let c = g.constant(&[4], vec![3.7; 4]).unwrap();
    let s = g.softmax_rows(c).unwrap();
    assert!(g.data(s).iter().all(|&v| (v - 0.25).abs() <= 1e-15));
}

#[test]
fn softmax_log_ratio_oracle() {
    // softmax([ln 1, ln 2, ln 3]) = [1/6, 2/6, 3/6] by direct exponentiation.
    let mut g = Graph::new();
    let a = g
        .constant(&[3], vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()])
        .unwrap();
    let s = g.softmax_rows(a).unwrap();
    let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
    assert!(max_abs_diff(g.data(s), &expect) <= 1e-12);
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::new();
    let a = g.constant(&[2], vec![f64::NAN, 0.0]).unwrap();
    assert!(matches!(
        g.softmax_rows(a),
        Err(TensorError::NonFinite { .. })
    ));
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let mut r = rng(3);
    let x = rand_vec(&mut r, 6 * 9);
    let shifted: Vec<f64> = x
        .chunks_exact(9)
        .flat_map(|row| row.iter().map(|v| v + 13.25))
        .collect();
    let mut g = Graph::new();
    let a = g.constant(&[6, 9], x).unwrap();
    let b = g.constant(&[6, 9], shifted).unwrap();
    let sa = g.softmax_rows(a).unwrap();
    let sb = g.softmax_rows(b).unwrap();
    for row in g.data(sa).chunks_exact(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    assert!(max_abs_diff(g.data(sa), g.data(sb)) <= 1e-12);
}

#[test]
fn layer_norm_constant_vector_collapses_to_beta() {
    let mut g = Graph::new();
    let x = g.constant(&[4], vec![2.5; 4]).unwrap();
    let gamma = g.constant(&[4], vec![1.0; 4]).unwrap();
    let beta = g.constant(&[4], vec![0.0; 4]).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_two_point_standardization() {
    let mut g = Graph::new();
    let x = g.constant(&[2], vec![1.0, 3.0]).unwrap();
    let gamma = g.constant(&[2], vec![1.0; 2]).unwrap();
    let beta = g.constant(&[2], vec![0.0; 2]).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    assert!(max_abs_diff(g.data(y), &[-1.0, 1.0]) <= 1e-6);
}

#[test]
fn layer_norm_moment_oracle() {
    let x = rand_vec(&mut rng(4), 33);
    let mut g = Graph::new();
    let xn = g.constant(&[33], x).unwrap();
    let gamma = g.constant(&[33], vec![1.0; 33]).unwrap();
    let beta = g.constant(&[33], vec![0.0; 33]).unwrap();
    let y = g.layer_norm(xn, gamma, beta, 1e-12).unwrap();
    let out = g.data(y);
    let mean = out.iter().sum::<f64>() / 33.0;
    let var = out.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 33.0;
    assert!(mean.abs() <= 1e-10, "mean {mean}");
    assert!((var - 1.0).abs() <= 1e-6, "var {var}");
}

#[test]
fn layer_norm_affine_input_invariance() {
    // Pre-affine output is unchanged under x -> a*x + b, a > 0.
    let x = rand_vec(&mut rng(5), 16);
    let rescaled: Vec<f64> = x.iter().map(|&v| 3.0 * v + 7.0).collect();
    let mut g = Graph::new();
    let gamma = g.constant(&[16], vec![1.0; 16]).unwrap();
    let beta = g.constant(&[16], vec![0.0; 16]).unwrap();
    let a = g.constant(&[16], x).unwrap();
    let b = g.constant(&[16], rescaled).unwrap();
    let ya = g.layer_norm(a, gamma, beta, 1e-12).unwrap();
    let yb = g.layer_norm(b, gamma, beta, 1e-12).unwrap();
    assert!(max_abs_diff(g.data(ya), g.data(yb)) <= 1e-9);
}

#[test]
fn gelu_odd_point_asymptotes_and_erf_oracle() {
    let mut g = Graph::new();
    let x = g
        .constant(&[4], vec![0.0, 1.0, 25.0, -25.0])
        .unwrap();
    let y = g.gelu(x);
    let out = g.data(y);
    assert_eq!(out[0], 0.0);
    // Phi(1) computed from the erf definition.
    let phi1 = 0.5 * (1.0 + libm::erf(1.0 / std::f64::consts::SQRT_2));
    assert!((out[1] - phi1).abs() <= 1e-6);
    assert!((out[2] - 25.0).abs() <= 1e-9);
    assert!(out[3].abs() <= 1e-9);
}

/// Quadruple-loop direct cross-correlation, the independent conv route.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut s = 0.0;
                for p in 0..kh {
                    for q in 0..kw {
                        for ci in 0..cin {
                            let iy = (oy * stride + p) as isize - pad as isize;
                            let ix = (ox * stride + q) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += x[(iy as usize * w + ix as usize) * cin + ci]
                                * k[((p * kw + q) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = s;
            }
        }
    }
    out
}

#[test]
fn conv2d_one_by_one_identity() {
    let x = rand_vec(&mut rng(6), 5 * 5);
    let mut g = Graph::new();
    let xn = g.constant(&[5, 5, 1], x.clone()).unwrap();
    let k = g.constant(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let y = g.conv2d(xn, k, 1, 0, false).unwrap();
    assert_eq!(g.data(y), &x[..]);
}

#[test]
fn conv2d_zero_kernel() {
    let mut g = Graph::new();
    let x = g
        .constant(&[4, 4, 2], rand_vec(&mut rng(7), 32))
        .unwrap();
    let k = g.constant(&[3, 3, 2, 3], vec![0.0; 54]).unwrap();
    let y = g.conv2d(x, k, 1, 1, false).unwrap();
    assert_eq!(g.shape(y), &[4, 4, 3]);
    assert!(g.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_quadruple_loop_oracle() {
    let mut r = rng(8);
    let x = rand_vec(&mut r, 8 * 8 * 2);
    let k = rand_vec(&mut r, 3 * 3 * 2 * 3);
    let expect = conv_oracle(&x, 8, 8, 2, &k, 3, 3, 3, 1, 1);
    let mut g = Graph::new();
    let xn = g.constant(&[8, 8, 2], x).unwrap();
    let kn = g.constant(&[3, 3, 2, 3], k).unwrap();
    let y = g.conv2d(xn, kn, 1, 1, false).unwrap();
    assert!(max_abs_diff(g.data(y), &expect) <= 1e-12);
}

#[test]
fn conv2d_depthwise_matches_per_channel_oracle() {
    let mut r = rng(9);
    let x = rand_vec(&mut r, 6 * 6 * 3);
    let k = rand_vec(&mut r, 3 * 3 * 3);
    // Per-channel oracle: run each channel through the full-conv oracle.
    let mut expect = vec![0.0; 6 * 6 * 3];
    for c in 0..3 {
        let xc: Vec<f64> = (0..36).map(|s| x[s * 3 + c]).collect();
        let kc: Vec<f64> = (0..9).map(|t| k[t * 3 + c]).collect();
        let oc = conv_oracle(&xc, 6, 6, 1, &kc, 3, 3, 1, 1, 1);
        for s in 0..36 {
            expect[s * 3 + c] = oc[s];
        }
    }
    let mut g = Graph::new();
    let xn = g.constant(&[6, 6, 3], x).unwrap();
    let kn = g.constant(&[3, 3, 3, 1], k).unwrap();
    let y = g.conv2d(xn, kn, 1, 1, true).unwrap();
    assert!(max_abs_diff(g.data(y), &expect) <= 1e-12);
}

#[test]
fn conv2d_geometry_error_reports_extents() {
    let mut g = Graph::new();
    let x = g.constant(&[2, 2, 1], vec![0.0; 4]).unwrap();
    let k = g.constant(&[5, 5, 1, 1], vec![0.0; 25]).unwrap();
    let err = g.conv2d(x, k, 1, 0, false).unwrap_err();
    assert!(matches!(err, TensorError::Geometry { .. }), "{err}");
}

#[test]
fn global_avg_pool_constant_and_one_hot() {
    let mut g = Graph::new();
    let c = g.constant(&[3, 3, 2], vec![4.5; 18]).unwrap();
    let y = g.global_avg_pool(c).unwrap();
    assert_eq!(g.data(y), &[4.5, 4.5]);

    let mut hot = vec![0.0; 4];
    hot[2] = 1.0;
    let h = g.constant(&[2, 2, 1], hot).unwrap();
    let y = g.global_avg_pool(h).unwrap();
    assert_eq!(g.data(y), &[0.25]);
}

#[test]
fn global_avg_pool_matches_mean_oracle() {
    let x = rand_vec(&mut rng(10), 7 * 5 * 3);
    let mut expect = vec![0.0; 3];
    for (i, &v) in x.iter().enumerate() {
        expect[i % 3] += v / 35.0;
    }
    let mut g = Graph::new();
    let xn = g.constant(&[7, 5, 3], x).unwrap();
    let y = g.global_avg_pool(xn).unwrap();
    assert!(max_abs_diff(g.data(y), &expect) <= 1e-12);
}

#[test]
fn global_avg_pool_rank_error() {
    let mut g = Graph::new();
    let x = g.constant(&[4], vec![0.0; 4]).unwrap();
    assert!(matches!(
        g.global_avg_pool(x),
        Err(TensorError::Rank { .. })
    ));
}

#[test]
fn l2_normalize_cases() {
    let mut g = Graph::new();
    let a = g.constant(&[2], vec![3.0, 4.0]).unwrap();
    let y = g.l2_normalize(a).unwrap();
    assert!(max_abs_diff(g.data(y), &[0.6, 0.8]) <= 1e-15);

    let unit = g.constant(&[2], vec![0.0, 1.0]).unwrap();
    let y = g.l2_normalize(unit).unwrap();
    assert_eq!(g.data(y), &[0.0, 1.0]);

    let x = rand_vec(&mut rng(11), 9);
    let xn = g.constant(&[9], x).unwrap();
    let y = g.l2_normalize(xn).unwrap();
    let norm = g.data(y).iter().map(|&v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() <= 1e-12);

    let z = g.constant(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let err = g.l2_normalize(z).unwrap_err();
    assert!(matches!(err, TensorError::ZeroRow { row: 1 }));
}

#[test]
fn backward_quadratic() {
    let mut g = Graph::new();
    let x = g.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_unused_parameter_gets_zeros() {
    let mut g = Graph::new();
    let x = g.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
    let unused = g.leaf(&[2], vec![5.0, 6.0], true).unwrap();
    let loss = g.sum(x);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
    assert!(matches!(
        g.backward(x),
        Err(TensorError::NonScalarLoss { .. })
    ));
}

#[test]
fn grad_check_rejects_non_positive_eps() {
    let params = [ParamSpec::new("x", &[1], vec![1.0])];
    let err = grad_check(|g, ids| Ok(g.sum(ids[0])), &params, 0.0, 8).unwrap_err();
    assert!(matches!(err, TensorError::NonPositiveEps { .. }));
}

#[test]
fn grad_check_linear_map_is_nearly_exact() {
    let mut r = rng(12);
    let params = [
        ParamSpec::new("w", &[4, 3], rand_vec(&mut r, 12)),
        ParamSpec::new("v", &[4], rand_vec(&mut r, 4)),
    ];
    let report = grad_check(
        |g, ids| {
            let y = g.vecmat(ids[1], ids[0])?;
            Ok(g.sum(y))
        },
        &params,
        1e-3,
        64,
    )
    .unwrap();
    assert!(report.max_rel_err() <= 1e-8, "{:?}", report);
}

/// Finite-difference coverage of every primitive, driven through
/// sum-of-outputs losses (spec invariant: <= 1e-4 relative in 64-bit).
#[test]
fn every_primitive_passes_finite_difference_check() {
    type Builder = fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>;
    let mut r = rng(13);
    let cases: Vec<(&str, Vec<ParamSpec>, Builder)> = vec![
        (
            "add_sub_mul_scale",
            vec![
                ParamSpec::new("a", &[2, 3], rand_vec(&mut r, 6)),
                ParamSpec::new("b", &[2, 3], rand_vec(&mut r, 6)),
            ],
            |g, ids| {
                let s = g.add(ids[0], ids[1])?;
                let d = g.sub(s, ids[1])?;
                let m = g.mul(d, ids[0])?;
                let sc = g.scale(m, 0.75);
                Ok(g.sum(sc))
            },
        ),
        (
            "add_row_vec",
            vec![
                ParamSpec::new("a", &[3, 4], rand_vec(&mut r, 12)),
                ParamSpec::new("v", &[4], rand_vec(&mut r, 4)),
            ],
            |g, ids| {
                let y = g.add_row_vec(ids[0], ids[1])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
        ),
        (
            "add_chan_vec",
            vec![
                ParamSpec::new("a", &[2, 3, 4], rand_vec(&mut r, 24)),
                ParamSpec::new("v", &[4], rand_vec(&mut r, 4)),
            ],
            |g, ids| {
                let y = g.add_chan_vec(ids[0], ids[1])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
        ),
        (
            "matmul_transpose",
            vec![
                ParamSpec::new("a", &[3, 4], rand_vec(&mut r, 12)),
                ParamSpec::new("b", &[3, 2], rand_vec(&mut r, 6)),
            ],
            |g, ids| {
                let at = g.transpose(ids[0])?;
                let y = g.matmul(at, ids[1])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
        ),
        (
            "vecmat",
            vec![
                ParamSpec::new("v", &[3], rand_vec(&mut r, 3)),
                ParamSpec::new("w", &[3, 5], rand_vec(&mut r, 15)),
            ],
            |g, ids| {
                let y = g.vecmat(ids[0], ids[1])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
        ),
        (
            "structural",
            vec![
                ParamSpec::new("a", &[3], rand_vec(&mut r, 3)),
                ParamSpec::new("b", &[3], rand_vec(&mut r, 3)),
                ParamSpec::new("m", &[2, 2], rand_vec(&mut r, 4)),
            ],
            |g, ids| {
                let cat = g.concat_vec(&[ids[0], ids[1]])?;
                let stacked = g.stack_rows(&[ids[0], ids[1]])?;
                let resh = g.reshape(ids[2], &[2, 2])?;
                let wide = g.concat_cols(&[stacked, resh])?;
                let s1 = g.sum(cat);
                let sq = g.mul(wide, wide)?;
                let s2 = g.sum(sq);
                g.add(s1, s2)
            },
        ),
        (
            "softmax_rows",
            vec![ParamSpec::new("a", &[3, 4], rand_vec(&mut r, 12))],
            |g, ids| {
                let s = g.softmax_rows(ids[0])?;
                let sq = g.mul(s, s)?;
                Ok(g.sum(sq))
            },
        ),
        (
            "layer_norm",
            vec![
                ParamSpec::new("x", &[2, 5], rand_vec(&mut r, 10)),
                ParamSpec::new("gamma", &[5], rand_vec(&mut r, 5)),
                ParamSpec::new("beta", &[5], rand_vec(&mut r, 5)),
            ],
            |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
        ),
        (
            "bce_with_logits",
            vec![ParamSpec::new("l", &[4], vec![8.0, -30.0, 0.3, 45.0])],
            |g, ids| {
                // Includes deeply saturated logits where the probability
                // form would have a dead gradient.
                g.bce_with_logits(ids[0], &[1.0, 1.0, 0.0, 0.0])
            },
        ),
        (
            "activations",
            vec![ParamSpec::new("x", &[6], rand_vec(&mut r, 6))],
            |g, ids| {
                let ge = g.gelu(ids[0]);
                let si = g.sigmoid(ge);
                let ex = g.exp(si);
                let ln = g.ln(ex);
                let cl = g.clamp(ln, -10.0, 10.0);
                Ok(g.sum(cl))
            },
        ),
        (
            "conv_full",
            vec![
                ParamSpec::new("x", &[4, 4, 2], rand_vec(&mut r, 32)),
                ParamSpec::new("k", &[3, 3, 2, 2], rand_vec(&mut r, 36)),
            ],
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], 1, 1, false)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
        ),
        (
            "conv_depthwise_pool",
            vec![
                ParamSpec::new("x", &[4, 4, 2], rand_vec(&mut r, 32)),
                ParamSpec::new("k", &[3, 3, 2, 1], rand_vec(&mut r, 18)),
            ],
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], 1, 1, true)?;
                let p = g.max_pool2(y)?;
                let sq = g.mul(p, p)?;
                Ok(g.sum(sq))
            },
        ),
        (
            "reductions",
            vec![ParamSpec::new("x", &[3, 4], rand_vec(&mut r, 12))],
            |g, ids| {
                let gap = g.global_avg_pool(ids[0])?;
                let rs = g.row_sum(ids[0])?;
                let rm = g.row_mean(ids[0])?;
                let s1 = g.sum(gap);
                let s2 = g.sum(rs);
                let s3 = g.sum(rm);
                let sq2 = g.mul(s2, s2)?;
                let a = g.add(s1, sq2)?;
                g.add(a, s3)
            },
        ),
        (
            "l2_normalize",
            vec![ParamSpec::new("x", &[2, 4], rand_vec(&mut r, 8))],
            |g, ids| {
                let y = g.l2_normalize(ids[0])?;
                let w = g.constant(&[2, 4], vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9, 0.1, 0.5])?;
                let m = g.mul(y, w)?;
                Ok(g.sum(m))
            },
        ),
    ];

    for (name, params, build) in cases {
        let report = grad_check(build, &params, 1e-3, 48).unwrap();
        assert!(
            report.max_rel_err() <= 1e-4,
            "{name}: {:?}",
            report.per_param
        );
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matmul_associativity((a, b, c) in (finite_vec(6), finite_vec(12), finite_vec(8))) {
            let mut g = Graph::new();
            let an = g.constant(&[2, 3], a).unwrap();
            let bn = g.constant(&[3, 4], b).unwrap();
            let cn = g.constant(&[4, 2], c).unwrap();
            let ab = g.matmul(an, bn).unwrap();
            let ab_c = g.matmul(ab, cn).unwrap();
            let bc = g.matmul(bn, cn).unwrap();
            let a_bc = g.matmul(an, bc).unwrap();
            prop_assert!(max_abs_diff(g.data(ab_c), g.data(a_bc)) <= 1e-9);
        }

        #[test]
        fn softmax_rows_are_distributions(x in finite_vec(20)) {
            let mut g = Graph::new();
            let a = g.constant(&[4, 5], x).unwrap();
            let s = g.softmax_rows(a).unwrap();
            for row in g.data(s).chunks_exact(5) {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn layer_norm_rescale_invariance(x in finite_vec(8), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            // Skip near-constant vectors where normalization is ill-conditioned.
            let mean = x.iter().sum::<f64>() / 8.0;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            prop_assume!(var > 1e-3);
            let scaled: Vec<f64> = x.iter().map(|&v| a * v + b).collect();
            let mut g = Graph::new();
            let gamma = g.constant(&[8], vec![1.0; 8]).unwrap();
            let beta = g.constant(&[8], vec![0.0; 8]).unwrap();
            let xn = g.constant(&[8], x).unwrap();
            let sn = g.constant(&[8], scaled).unwrap();
            let y1 = g.layer_norm(xn, gamma, beta, 1e-12).unwrap();
            let y2 = g.layer_norm(sn, gamma, beta, 1e-12).unwrap();
            prop_assert!(max_abs_diff(g.data(y1), g.data(y2)) <= 1e-9);
        }
    }
}
