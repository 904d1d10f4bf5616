//! Manual kernel timing. Run with --ignored --nocapture.

use std::time::Instant;

use fishsr::params::{Forward, ParameterStore};
use fishsr::tape::Tape;
use fishsr::tensor::{Shape, Tensor};
use fishsr::SplitMix64;

#[test]
#[ignore]
fn conv_forward_and_backward_rates() {
    let mut rng = SplitMix64::new(1);
    let xs = Shape::new(4, 16, 128, 128);
    let x = Tensor::<f32>::uniform(xs, -1.0, 1.0, &mut rng);
    let w = Tensor::<f32>::uniform(Shape::new(16, 16, 3, 3), -0.1, 0.1, &mut rng);
    let b = Tensor::<f32>::zeros(Shape::new(1, 16, 1, 1));
    let macs = (4 * 16 * 16 * 9 * 128 * 128) as f64;

    // forward only
    let iters = 20;
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let wi = tape.constant(w.clone());
        let bi = tape.constant(b.clone());
        let _ = tape.conv2d(xi, wi, bi, 1, 1).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("conv fwd: {:.2} ms, {:.1} GFLOP/s", dt * 1e3, 2.0 * macs / dt / 1e9);

    // forward + backward wrt x, w, b
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone(), true);
        let wi = tape.leaf(w.clone(), true);
        let bi = tape.leaf(b.clone(), true);
        let out = tape.conv2d(xi, wi, bi, 1, 1).unwrap();
        let z = tape.constant(Tensor::filled(xs, 0.5));
        let loss = tape.l1_loss(out, z).unwrap();
        tape.backward(loss).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("conv fwd+bwd: {:.2} ms, {:.1} GFLOP/s", dt * 1e3, 3.0 * 2.0 * macs / dt / 1e9);
}

#[test]
#[ignore]
fn fish_forward_and_step_breakdown() {
    use fishsr::networks::{build_model, ModelConfig};
    let mut cfg = ModelConfig::desk(4);
    cfg.seed = 7;
    let (_, fish, store) = build_model::<f32>(&cfg).unwrap();
    let mut rng = SplitMix64::new(2);
    let lr = Tensor::<f32>::uniform(Shape::new(4, 3, 32, 32), 0.0, 1.0, &mut rng);
    let map = Tensor::<f32>::uniform(Shape::new(4, 1, 32, 32), 0.0, 1.0, &mut rng);
    let hr = Tensor::<f32>::uniform(Shape::new(4, 3, 128, 128), 0.0, 1.0, &mut rng);

    let t0 = Instant::now();
    let iters = 3;
    for _ in 0..iters {
        let mut tape = Tape::new();
        let mut fx = Forward::new(&mut tape, &store, false);
        let x = fx.tape.constant(lr.clone());
        let m = fx.tape.constant(map.clone());
        let _ = fish.forward(&mut fx, x, m).unwrap();
    }
    println!("fish fwd only: {:.3} s", t0.elapsed().as_secs_f64() / iters as f64);

    let t0 = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let mut fx = Forward::new(&mut tape, &store, true);
        let x = fx.tape.constant(lr.clone());
        let m = fx.tape.constant(map.clone());
        let sr = fish.forward(&mut fx, x, m).unwrap();
        let y = fx.tape.constant(hr.clone());
        let loss = fx.tape.l1_loss(sr, y).unwrap();
        fx.tape.backward(loss).unwrap();
        let _ = fx.take_grads();
    }
    println!("fish fwd+bwd: {:.3} s", t0.elapsed().as_secs_f64() / iters as f64);
    let _ = ParameterStore::<f32>::new();
}

#[test]
#[ignore]
fn backward_kernel_rates() {
    use fishsr::kernels::{conv2d_backward_input, conv2d_backward_weights, ConvSpec};
    let mut rng = SplitMix64::new(3);
    let xs = Shape::new(4, 16, 128, 128);
    let x = Tensor::<f32>::uniform(xs, -1.0, 1.0, &mut rng);
    let w = Tensor::<f32>::uniform(Shape::new(16, 16, 3, 3), -0.1, 0.1, &mut rng);
    let gout = Tensor::<f32>::uniform(xs, -1.0, 1.0, &mut rng);
    let spec = ConvSpec { cout: 16, cin: 16, k: 3, stride: 1, pad: 1 };
    let macs = (4 * 16 * 16 * 9 * 128 * 128) as f64;

    let iters = 20;
    let mut gin = vec![0.0f32; xs.numel()];
    let t0 = Instant::now();
    for _ in 0..iters {
        conv2d_backward_input(gout.data(), xs, w.data(), spec, &mut gin, xs);
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("bwd-input: {:.2} ms, {:.1} GFLOP/s", dt * 1e3, 2.0 * macs / dt / 1e9);

    let mut gw = vec![0.0f32; 16 * 16 * 9];
    let mut gb = vec![0.0f32; 16];
    let t0 = Instant::now();
    for _ in 0..iters {
        gw.iter_mut().for_each(|v| *v = 0.0);
        conv2d_backward_weights(x.data(), xs, gout.data(), xs, spec, &mut gw, &mut gb);
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    println!("bwd-weight: {:.2} ms, {:.1} GFLOP/s", dt * 1e3, 2.0 * macs / dt / 1e9);
}
