//! Finite-difference verification of every block's gradients, plus the
//! basics the checker itself must get right.

use fishsr::gradcheck::{grad_check, run_check, suite_names, Evaluation};
use fishsr::tape::Tape;
use fishsr::tensor::{Shape, Tensor};
use fishsr::SplitMix64;

#[test]
fn quadratic_gradient_is_nearly_exact() {
    // f(x) = mean(x * x): the analytic gradient 2x / n is smooth, so the
    // central difference agrees to ~1e-8
    let mut rng = SplitMix64::new(1);
    let x = Tensor::<f64>::uniform(Shape::new(1, 1, 3, 3), 0.5, 1.5, &mut rng);
    let report = grad_check(
        &[x],
        |vals, with_grads| {
            let mut tape = Tape::new();
            let xi = tape.leaf(vals[0].clone(), with_grads);
            let sq = tape.mul(xi, xi)?;
            let loss = tape.global_avg_pool(sq);
            let value = tape.scalar_value(loss);
            let kink_margin = tape.kink_margin();
            let signature = tape.kink_signature();
            if !with_grads {
                return Ok(Evaluation { loss: value, grads: None, kink_margin, signature });
            }
            tape.backward(loss)?;
            let g = tape.grad(xi).unwrap().to_vec();
            Ok(Evaluation { loss: value, grads: Some(vec![g]), kink_margin, signature })
        },
        1e-4,
        0,
        &mut rng,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-8, "max rel err {}", report.max_rel_err);
}

#[test]
fn every_block_passes_its_tolerance() {
    let mut failures = Vec::new();
    for name in suite_names() {
        let entry = run_check(&name, 3).unwrap();
        println!(
            "{:<22} max_rel_err {:.3e} (tolerance {:.0e})",
            entry.name, entry.max_rel_err, entry.tolerance
        );
        if !entry.passed() {
            failures.push(entry);
        }
    }
    assert!(failures.is_empty(), "blocks over tolerance: {failures:?}");
}
