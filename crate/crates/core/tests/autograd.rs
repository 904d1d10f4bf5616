//! Tape operation oracles: every op is checked against an independent
//! reference computation written here (plain nested loops), plus frozen
//! hand-derived cases.

use fishsr::tape::Tape;
use fishsr::tensor::{Shape, Tensor};
use fishsr::SplitMix64;

/// Reference convolution: direct nested-loop summation, no shortcuts.
/// Kept independent of the library's kernel code on purpose.
#[allow(clippy::needless_range_loop)]
fn oracle_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let (cout, cin, k) = (ws.n, ws.c, ws.h);
    assert_eq!(xs.c, cin);
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n, cout, oh, ow));
    for n in 0..xs.n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0
                                    && iy < xs.h as isize
                                    && ix >= 0
                                    && ix < xs.w as isize
                                {
                                    acc += x.at(n, ci, iy as usize, ix as usize)
                                        * w.at(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    out.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

fn run_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let wi = tape.constant(w.clone());
    let bi = tape.constant(
        Tensor::from_f64_slice(Shape::new(1, b.len(), 1, 1), b).unwrap(),
    );
    let out = tape.conv2d(xi, wi, bi, stride, pad).unwrap();
    tape.value(out)
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() < tol, "element {i}: {x} vs {y}");
    }
}

#[test]
fn conv_ones_3x3_padded_counts_window_overlap() {
    // all-ones input and kernel on a 3x3 image with padding 1: each output
    // counts the in-bounds taps, so center 9, edges 6, corners 4
    let x = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0);
    let w = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0);
    let out = run_conv(&x, &w, &[0.0], 1, 1);
    let expect = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
    assert_eq!(out.data(), &expect);
    assert_close(&out, &oracle_conv(&x, &w, &[0.0], 1, 1), 1e-12);
}

#[test]
fn conv_identity_1x1_kernel_passes_input_through() {
    let mut rng = SplitMix64::new(1);
    let x = Tensor::<f64>::uniform(Shape::new(2, 1, 4, 5), -1.0, 1.0, &mut rng);
    let w = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
    let out = run_conv(&x, &w, &[0.0], 1, 0);
    assert_eq!(out.data(), x.data());
}

#[test]
fn conv_zero_input_yields_bias() {
    let x = Tensor::zeros(Shape::new(1, 2, 3, 3));
    let mut rng = SplitMix64::new(2);
    let w = Tensor::<f64>::uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0, &mut rng);
    let out = run_conv(&x, &w, &[0.5, -1.25, 2.0], 1, 1);
    for co in 0..3 {
        for y in 0..3 {
            for xx in 0..3 {
                assert_eq!(out.at(0, co, y, xx), [0.5, -1.25, 2.0][co]);
            }
        }
    }
}

#[test]
fn conv_matches_oracle_on_random_cases() {
    let mut rng = SplitMix64::new(3);
    let cases = [
        (1, 1, 1, 5, 5, 3, 1, 1),
        (2, 3, 4, 6, 7, 3, 1, 1),
        (1, 2, 2, 8, 8, 1, 1, 0),
        (1, 2, 1, 9, 9, 7, 1, 3),
        (1, 3, 2, 7, 7, 3, 2, 1),
        (2, 2, 3, 8, 6, 3, 1, 0),
        (1, 4, 4, 6, 6, 5, 1, 2),
        (1, 2, 2, 10, 10, 3, 3, 1),
    ];
    for &(n, cin, cout, h, w, k, stride, pad) in &cases {
        let x = Tensor::<f64>::uniform(Shape::new(n, cin, h, w), -1.0, 1.0, &mut rng);
        let wt = Tensor::<f64>::uniform(Shape::new(cout, cin, k, k), -1.0, 1.0, &mut rng);
        let b: Vec<f64> = (0..cout).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let got = run_conv(&x, &wt, &b, stride, pad);
        let expect = oracle_conv(&x, &wt, &b, stride, pad);
        assert_close(&got, &expect, 1e-10);
    }
}

#[test]
fn conv_contract_violations_name_the_dimension() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let w_bad_cin = tape.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
    let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let err = tape.conv2d(x, w_bad_cin, b, 1, 1).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");

    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
    let w_even = tape.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
    let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    assert!(tape.conv2d(x, w_even, b, 1, 1).is_err());
}

#[test]
fn relu_and_sigmoid_reference_points() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(
        Tensor::from_f64_slice(Shape::new(1, 1, 1, 4), &[-2.0, 0.0, 3.0, -0.5]).unwrap(),
    );
    let r = tape.relu(x);
    assert_eq!(tape.data(r), &[0.0, 0.0, 3.0, 0.0]);
    let zero = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(zero);
    assert_eq!(tape.data(s), &[0.5]);
}

#[test]
fn sigmoid_complement_identity() {
    let mut rng = SplitMix64::new(4);
    let vals: Vec<f64> = (0..32).map(|_| rng.uniform(-8.0, 8.0)).collect();
    let t: Tensor<f64> = Tensor::from_f64_slice(Shape::new(1, 1, 1, 32), &vals).unwrap();
    let neg = t.map(|v| -v);
    let mut tape = Tape::new();
    let a = tape.constant(t);
    let b = tape.constant(neg);
    let sa = tape.sigmoid(a);
    let sb = tape.sigmoid(b);
    for (x, y) in tape.data(sa).iter().zip(tape.data(sb)) {
        assert!((x + y - 1.0).abs() < 1e-12);
    }
}

#[test]
fn elementwise_trivial_identities() {
    let mut rng = SplitMix64::new(5);
    let x = Tensor::<f64>::uniform(Shape::new(1, 3, 4, 4), -2.0, 2.0, &mut rng);
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let diff = tape.sub(a, a).unwrap();
    assert!(tape.data(diff).iter().all(|&v| v == 0.0));
    let ones = tape.constant(Tensor::filled(Shape::new(1, 3, 1, 1), 1.0));
    let same = tape.mul(a, ones).unwrap();
    assert_eq!(tape.data(same), x.data());
}

#[test]
fn broadcast_add_matches_explicit_loop() {
    // (1,2,1,1) + (1,2,2,2): each channel gets a constant shift
    let small = Tensor::from_f64_slice(Shape::new(1, 2, 1, 1), &[10.0, -3.0]).unwrap();
    let mut rng = SplitMix64::new(6);
    let big = Tensor::<f64>::uniform(Shape::new(1, 2, 2, 2), -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let a = tape.constant(small.clone());
    let b = tape.constant(big.clone());
    let out = tape.add(a, b).unwrap();
    for c in 0..2 {
        for y in 0..2 {
            for x in 0..2 {
                let expect = small.at(0, c, 0, 0) + big.at(0, c, y, x);
                assert_eq!(tape.value(out).at(0, c, y, x), expect);
            }
        }
    }
}

#[test]
fn broadcast_rejects_unrelated_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
    let b = tape.constant(Tensor::zeros(Shape::new(1, 3, 3, 4)));
    assert!(tape.add(a, b).is_err());
}

#[test]
fn concat_orders_channels_and_routes_gradients() {
    let a: Tensor<f64> =
        Tensor::from_f64_slice(Shape::new(1, 2, 1, 2), &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let b =
        Tensor::from_f64_slice(Shape::new(1, 3, 1, 2), &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
    let mut tape = Tape::new();
    let ai = tape.leaf(a, true);
    let bi = tape.leaf(b, true);
    let cat = tape.concat_channels(&[ai, bi]).unwrap();
    assert_eq!(tape.shape(cat), Shape::new(1, 5, 1, 2));
    assert_eq!(tape.data(cat), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);

    // single-input concat is the identity
    let solo = tape.concat_channels(&[ai]).unwrap();
    assert_eq!(tape.data(solo), &[1.0, 2.0, 3.0, 4.0]);

    // loss = mean |cat - 0| with all entries positive: every coordinate of
    // both inputs should see gradient 1/10
    let zeros = tape.constant(Tensor::zeros(Shape::new(1, 5, 1, 2)));
    let loss = tape.l1_loss(cat, zeros).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(ai).unwrap().iter().all(|&g| (g - 0.1).abs() < 1e-12));
    assert!(tape.grad(bi).unwrap().iter().all(|&g| (g - 0.1).abs() < 1e-12));
}

#[test]
fn concat_rejects_spatial_mismatch() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 3)));
    assert!(tape.concat_channels(&[a, b]).is_err());
}

#[test]
fn pixel_shuffle_lays_out_quads() {
    let x: Tensor<f64> =
        Tensor::from_f64_slice(Shape::new(1, 4, 1, 1), &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let xi = tape.constant(x);
    let out = tape.pixel_shuffle(xi).unwrap();
    assert_eq!(tape.shape(out), Shape::new(1, 1, 2, 2));
    assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn shuffle_round_trips_bitwise_on_random_shapes() {
    let mut rng = SplitMix64::new(7);
    for _ in 0..20 {
        let n = 1 + rng.below(2);
        let c = 4 * (1 + rng.below(3));
        let h = 1 + rng.below(5);
        let w = 1 + rng.below(5);
        let x = Tensor::<f64>::uniform(Shape::new(n, c, h, w), -9.0, 9.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let s = tape.pixel_shuffle(xi).unwrap();
        let back = tape.pixel_unshuffle(s).unwrap();
        assert!(tape.value(back).bits_eq(&x));
        assert_eq!(tape.shape(s).numel(), x.shape().numel());

        // and the other direction, starting from even dims
        let x2 =
            Tensor::<f64>::uniform(Shape::new(n, 1 + rng.below(4), 2 * (1 + rng.below(4)), 2 * (1 + rng.below(4))), -9.0, 9.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.constant(x2.clone());
        let u = tape.pixel_unshuffle(xi).unwrap();
        let back = tape.pixel_shuffle(u).unwrap();
        assert!(tape.value(back).bits_eq(&x2));
    }
}

#[test]
fn shuffle_contract_violations() {
    let mut tape = Tape::<f64>::new();
    let odd_c = tape.constant(Tensor::zeros(Shape::new(1, 3, 2, 2)));
    assert!(tape.pixel_shuffle(odd_c).is_err());
    let odd_hw = tape.constant(Tensor::zeros(Shape::new(1, 1, 3, 4)));
    assert!(tape.pixel_unshuffle(odd_hw).is_err());
}

#[test]
fn nearest_resize_reference_cases() {
    let mut rng = SplitMix64::new(8);
    let x = Tensor::<f64>::uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let same = tape.nearest_resize(xi, 3, 3).unwrap();
    assert!(tape.value(same).bits_eq(&x));

    let one = tape.constant(Tensor::scalar(7.5));
    let big = tape.nearest_resize(one, 4, 4).unwrap();
    assert!(tape.data(big).iter().all(|&v| v == 7.5));

    // 2x upscale block-replicates: src index floor(dst/2)
    let quad =
        tape.constant(Tensor::from_f64_slice(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let up = tape.nearest_resize(quad, 4, 4).unwrap();
    let v = tape.value(up);
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(v.at(0, 0, y, x), [[1.0, 2.0], [3.0, 4.0]][y / 2][x / 2]);
        }
    }
}

#[test]
fn pool_and_stats_reference_cases() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::filled(Shape::new(1, 3, 4, 4), 2.5));
    let pooled = tape.global_avg_pool(c);
    assert_eq!(tape.shape(pooled), Shape::new(1, 3, 1, 1));
    assert!(tape.data(pooled).iter().all(|&v| (v - 2.5).abs() < 1e-12));
    let stats = tape.channel_stats(c);
    assert_eq!(tape.shape(stats), Shape::new(1, 2, 4, 4));
    assert!(tape.data(stats).iter().all(|&v| (v - 2.5).abs() < 1e-12));

    // one-hot spatial map pools to 1/(H*W)
    let mut onehot = Tensor::zeros(Shape::new(1, 1, 4, 4));
    onehot.set(0, 0, 1, 2, 1.0);
    let o = tape.constant(onehot);
    let p = tape.global_avg_pool(o);
    assert!((tape.data(p)[0] - 1.0 / 16.0).abs() < 1e-12);
}

#[test]
fn channel_stats_max_gradient_goes_to_argmax_only() {
    // channel 1 wins everywhere; mean gradient spreads over C, max
    // gradient lands on the winner
    let x: Tensor<f64> = Tensor::from_f64_slice(
        Shape::new(1, 2, 1, 2),
        &[0.1, 0.2, 0.9, 0.8], // c0: [0.1, 0.2], c1: [0.9, 0.8]
    )
    .unwrap();
    let mut tape = Tape::new();
    let xi = tape.leaf(x, true);
    let stats = tape.channel_stats(xi);
    let target = tape.constant(Tensor::zeros(Shape::new(1, 2, 1, 2)));
    let loss = tape.l1_loss(stats, target).unwrap();
    tape.backward(loss).unwrap();
    // every stats entry is positive, so dL/dstats = 1/4 each;
    // mean path gives 1/4 * 1/2 = 1/8 to every input, max path adds 1/4
    // to channel 1 entries
    let g = tape.grad(xi).unwrap();
    assert!((g[0] - 0.125).abs() < 1e-12);
    assert!((g[1] - 0.125).abs() < 1e-12);
    assert!((g[2] - 0.375).abs() < 1e-12);
    assert!((g[3] - 0.375).abs() < 1e-12);
}

#[test]
fn l1_reference_cases_and_loop_oracle() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::filled(Shape::new(1, 1, 2, 2), 0.7));
    let same = tape.l1_loss(x, x).unwrap();
    assert_eq!(tape.scalar_value(same), 0.0);

    let zeros = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    let ones = tape.constant(Tensor::filled(Shape::new(1, 1, 2, 2), 1.0));
    let l = tape.l1_loss(zeros, ones).unwrap();
    assert_eq!(tape.scalar_value(l), 1.0);

    let mut rng = SplitMix64::new(9);
    let a = Tensor::<f64>::uniform(Shape::new(2, 3, 5, 4), -2.0, 2.0, &mut rng);
    let b = Tensor::<f64>::uniform(Shape::new(2, 3, 5, 4), -2.0, 2.0, &mut rng);
    let expect: f64 =
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 120.0;
    let mut tape = Tape::new();
    let ai = tape.constant(a);
    let bi = tape.constant(b);
    let l = tape.l1_loss(ai, bi).unwrap();
    assert!((tape.scalar_value(l) - expect).abs() < 1e-12);

    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
    let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 3)));
    assert!(tape.l1_loss(a, b).is_err());
}

#[test]
fn backward_positive_l1_gives_uniform_gradient() {
    // loss = mean |x| with x > 0: every gradient is 1/numel
    let mut rng = SplitMix64::new(10);
    let x = Tensor::<f64>::uniform(Shape::new(1, 2, 3, 3), 0.5, 2.0, &mut rng);
    let mut tape = Tape::new();
    let xi = tape.leaf(x, true);
    let z = tape.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
    let loss = tape.l1_loss(xi, z).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(xi).unwrap().iter().all(|&g| (g - 1.0 / 18.0).abs() < 1e-12));
}

#[test]
fn backward_accumulates_over_multiple_consumers() {
    // f(x) = x + x: gradient is 2 per coordinate (scaled by the L1 mean)
    let x: Tensor<f64> = Tensor::filled(Shape::new(1, 1, 1, 2), 3.0);
    let mut tape = Tape::new();
    let xi = tape.leaf(x, true);
    let doubled = tape.add(xi, xi).unwrap();
    let z = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 2)));
    let loss = tape.l1_loss(doubled, z).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(xi).unwrap().iter().all(|&g| (g - 1.0).abs() < 1e-12));
}

#[test]
fn backward_requires_scalar_loss_and_runs_once() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)), true);
    assert!(tape.backward(x).is_err());

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 1, 1), 2.0), true);
    let z = tape.constant(Tensor::zeros(Shape::scalar()));
    let loss = tape.l1_loss(x, z).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.backward(loss).is_err());
}

#[test]
fn broadcast_gradients_reduce_over_broadcast_axes() {
    // gate (N,C,1,1) multiplied into (N,C,H,W): the gate's gradient is the
    // spatial sum of gout * x, checked against an explicit loop
    let mut rng = SplitMix64::new(11);
    let x = Tensor::<f64>::uniform(Shape::new(1, 2, 3, 3), 0.3, 1.0, &mut rng);
    let gate = Tensor::<f64>::uniform(Shape::new(1, 2, 1, 1), 0.5, 0.9, &mut rng);
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let gi = tape.leaf(gate.clone(), true);
    let prod = tape.mul(xi, gi).unwrap();
    let z = tape.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
    let loss = tape.l1_loss(prod, z).unwrap();
    tape.backward(loss).unwrap();
    // every product entry is positive so dL/dprod = 1/18
    let g = tape.grad(gi).unwrap();
    #[allow(clippy::needless_range_loop)]
    for c in 0..2 {
        let mut expect = 0.0;
        for y in 0..3 {
            for xx in 0..3 {
                expect += x.at(0, c, y, xx) / 18.0;
            }
        }
        assert!((g[c] - expect).abs() < 1e-12, "channel {c}: {} vs {expect}", g[c]);
    }
}
