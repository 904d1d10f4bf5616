//! Finite-difference verification of the reverse-mode gradients.
//!
//! The checker never trusts the tape: it compares each autodiff gradient
//! coordinate against a central difference of the scalar loss, computed
//! in double precision, and reports the worst relative error
//! `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
//!
//! Non-differentiable points (ReLU zero crossings, channel-max ties, L1
//! zeros) would poison a finite difference, so every case samples fresh
//! inputs until the tape reports a kink margin of at least `10 * eps`.

use crate::blocks::{
    ChannelAttention, DownModule, Msrb, Pafb, PafbToggles, RefineBlock, ResBlock,
    SpatialAttention, UpModule,
};
use crate::error::{Error, Result};
use crate::networks::{FishFsrNet, ModelConfig};
use crate::params::{Forward, ParamBuilder, ParameterStore};
use crate::rng::SplitMix64;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-4;
/// Per-block tolerance on the max relative error.
pub const BLOCK_TOLERANCE: f64 = 1e-5;
/// Tolerance for the tiny end-to-end model (longer chains accumulate
/// more truncation error).
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub kink_margin: f64,
    /// Coordinates actually compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed into a
    /// different activation pattern (the difference would not measure a
    /// derivative there).
    pub skipped: usize,
}

/// Result of a named suite case.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// One forward evaluation: the scalar loss, the per-variable gradients
/// when requested (zeros for variables the loss does not reach), the
/// kink margin, and the activation-pattern signature.
pub struct Evaluation {
    pub loss: f64,
    pub grads: Option<Vec<Vec<f64>>>,
    pub kink_margin: f64,
    pub signature: u64,
}

/// Compare autodiff gradients against central differences.
///
/// `eval(values, with_grads)` must run the forward pass on the given
/// variable values. Coordinates are checked exhaustively when a variable
/// has at most `max_coords` elements, otherwise on a sampled subset. A
/// coordinate whose +/- eps evaluations land in different activation
/// patterns is skipped: the loss is only piecewise smooth and a
/// difference across a kink measures nothing.
pub fn grad_check<F>(
    vars: &[Tensor<f64>],
    mut eval: F,
    eps: f64,
    max_coords: usize,
    rng: &mut SplitMix64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<Evaluation>,
{
    let center = eval(vars, true)?;
    let grads =
        center.grads.ok_or_else(|| Error::contract("eval returned no gradients"))?;
    if grads.len() != vars.len() {
        return Err(Error::contract("gradient count does not match variable count"));
    }

    let mut work: Vec<Tensor<f64>> = vars.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for (v, var) in vars.iter().enumerate() {
        let numel = var.shape().numel();
        for i in pick_coords(numel, max_coords, rng) {
            let orig = var.data()[i];
            work[v].data_mut()[i] = orig + eps;
            let plus = eval(&work, false)?;
            work[v].data_mut()[i] = orig - eps;
            let minus = eval(&work, false)?;
            work[v].data_mut()[i] = orig;
            if plus.signature != center.signature || minus.signature != center.signature {
                skipped += 1;
                continue;
            }
            let fd = (plus.loss - minus.loss) / (2.0 * eps);
            let ad = grads[v][i];
            let rel = (ad - fd).abs() / 1.0f64.max(ad.abs()).max(fd.abs());
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, kink_margin: center.kink_margin, checked, skipped })
}

fn pick_coords(numel: usize, max_coords: usize, rng: &mut SplitMix64) -> Vec<usize> {
    if max_coords == 0 || numel <= max_coords {
        return (0..numel).collect();
    }
    let mut all: Vec<usize> = (0..numel).collect();
    rng.shuffle(&mut all);
    all.truncate(max_coords);
    all.sort_unstable();
    all
}

/// A forward closure over staged inputs, boxed so heterogeneous blocks
/// share one harness.
type ForwardFn = Box<dyn Fn(&mut Forward<'_, f64>, &[TensorId]) -> Result<TensorId>>;

/// Harness for one block: builds the block's parameters, samples inputs
/// clear of kinks, and runs the finite-difference comparison over the
/// inputs and every parameter tensor.
#[allow(clippy::too_many_arguments)]
fn check_case(
    name: &str,
    tolerance: f64,
    seed: u64,
    input_shapes: &[Shape],
    input_range: (f64, f64),
    make: &dyn Fn(&mut ParamBuilder<'_, f64>) -> Result<ForwardFn>,
    max_coords: usize,
    require_margin: bool,
) -> Result<SuiteEntry> {
    let eps = DEFAULT_EPS;
    for attempt in 0..50u64 {
        let mut rng = SplitMix64::new(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9)));
        let mut store = ParameterStore::new();
        let forward = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            make(&mut b)?
        };
        let inputs: Vec<Tensor<f64>> = input_shapes
            .iter()
            .map(|&s| Tensor::uniform(s, input_range.0, input_range.1, &mut rng))
            .collect();

        // fix a target in the output shape so the loss is scalar
        let out_shape = {
            let mut tape = Tape::new();
            let mut fx = Forward::new(&mut tape, &store, false);
            let ids: Vec<TensorId> =
                inputs.iter().map(|t| fx.tape.constant(t.clone())).collect();
            let out = forward(&mut fx, &ids)?;
            tape.shape(out)
        };
        let target = Tensor::<f64>::uniform(out_shape, -0.5, 0.5, &mut rng);

        let n_inputs = inputs.len();
        let param_ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        let mut vars = inputs;
        for (_, p) in store.iter() {
            vars.push(p.value.clone());
        }

        let eval = |vals: &[Tensor<f64>], with_grads: bool| -> Result<Evaluation> {
            let mut store2 = store.clone();
            for (k, &pid) in param_ids.iter().enumerate() {
                store2.get_mut(pid).value = vals[n_inputs + k].clone();
            }
            let mut tape = Tape::new();
            let mut fx = Forward::new(&mut tape, &store2, with_grads);
            let in_ids: Vec<TensorId> =
                vals[..n_inputs].iter().map(|t| fx.tape.leaf(t.clone(), with_grads)).collect();
            let out = forward(&mut fx, &in_ids)?;
            let tgt = fx.tape.constant(target.clone());
            let loss = fx.tape.l1_loss(out, tgt)?;
            let loss_value = fx.tape.scalar_value(loss);
            let kink_margin = fx.tape.kink_margin();
            let signature = fx.tape.kink_signature();
            if !with_grads {
                return Ok(Evaluation { loss: loss_value, grads: None, kink_margin, signature });
            }
            fx.tape.backward(loss)?;
            let mut grads = Vec::with_capacity(vals.len());
            for (k, id) in in_ids.iter().enumerate() {
                grads.push(
                    fx.tape
                        .grad(*id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; vals[k].shape().numel()]),
                );
            }
            let pgrads = fx.take_grads();
            for (k, &pid) in param_ids.iter().enumerate() {
                grads.push(
                    pgrads
                        .get(pid)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; vals[n_inputs + k].shape().numel()]),
                );
            }
            Ok(Evaluation { loss: loss_value, grads: Some(grads), kink_margin, signature })
        };

        // reject samples sitting on a kink, then run the comparison;
        // deep cases skip the global margin gate (some of their thousands
        // of pre-activations always sit near zero) and lean on the
        // per-coordinate signature guard instead
        let probe = eval(&vars, false)?;
        if require_margin && probe.kink_margin < 10.0 * eps {
            continue;
        }
        let report = grad_check(&vars, eval, eps, max_coords, &mut rng)?;
        if report.checked == 0 {
            continue;
        }
        return Ok(SuiteEntry {
            name: name.to_string(),
            max_rel_err: report.max_rel_err,
            tolerance,
        });
    }
    Err(Error::config(format!("{name}: could not sample inputs clear of kinks")))
}

fn pafb_case_name(t: PafbToggles) -> String {
    let mut parts = Vec::new();
    if t.use_ca {
        parts.push("ca");
    }
    if t.use_sa {
        parts.push("sa");
    }
    if t.use_pmb {
        parts.push("pmb");
    }
    if parts.is_empty() {
        "pafb[none]".to_string()
    } else {
        format!("pafb[{}]", parts.join("+"))
    }
}

/// Names understood by [`run_check`], in suite order.
pub fn suite_names() -> Vec<String> {
    let mut names = vec![
        "conv2d".to_string(),
        "resblock".to_string(),
        "channel_attention".to_string(),
        "spatial_attention".to_string(),
        "refine_block".to_string(),
        "msrb2".to_string(),
        "msrb3".to_string(),
        "msrb4".to_string(),
        "up".to_string(),
        "down".to_string(),
    ];
    for mask in 0..8u32 {
        names.push(pafb_case_name(PafbToggles {
            use_ca: mask & 1 != 0,
            use_sa: mask & 2 != 0,
            use_pmb: mask & 4 != 0,
        }));
    }
    names.push("end_to_end".to_string());
    names
}

/// Run one named case. The per-case `max_coords` values keep the whole
/// suite double-precision yet fast.
pub fn run_check(name: &str, seed: u64) -> Result<SuiteEntry> {
    let c = 4;
    let x44 = Shape::new(1, c, 6, 6);
    match name {
        "conv2d" => check_case(
            name,
            BLOCK_TOLERANCE,
            seed,
            &[x44],
            (-1.0, 1.0),
            &|b| {
                let layer = b.conv("conv", 4, 5, 3)?;
                Ok(Box::new(move |fx, ids| fx.conv(layer, ids[0], 1, 1)))
            },
            12,
            true,
        ),
        "resblock" => check_case(
            name,
            BLOCK_TOLERANCE,
            seed,
            &[x44],
            (-1.0, 1.0),
            &|b| {
                let blk = ResBlock::new(b, "rb", 4)?;
                Ok(Box::new(move |fx, ids| blk.forward(fx, ids[0])))
            },
            10,
            true,
        ),
        "channel_attention" => check_case(
            name,
            BLOCK_TOLERANCE,
            seed,
            &[Shape::new(1, 8, 5, 5)],
            (-1.0, 1.0),
            &|b| {
                let blk = ChannelAttention::new(b, "ca", 8)?;
                Ok(Box::new(move |fx, ids| blk.forward(fx, ids[0])))
            },
            10,
            true,
        ),
        "spatial_attention" => check_case(
            name,
            BLOCK_TOLERANCE,
            seed,
            &[Shape::new(1, 3, 8, 8)],
            (-1.0, 1.0),
            &|b| {
                let blk = SpatialAttention::new(b, "sa")?;
                Ok(Box::new(move |fx, ids| blk.forward(fx, ids[0])))
            },
            10,
            true,
        ),
        "refine_block" => check_case(
            name,
            BLOCK_TOLERANCE,
            seed,
            &[Shape::new(1, c, 8, 8), Shape::new(1, c, 4, 4)],
            (-1.0, 1.0),
            &|b| {
                let blk = RefineBlock::new(b, "ref", 4)?;
                Ok(Box::new(move |fx, ids| blk.forward(fx, ids[0], ids[1])))
            },
            10,
            true,
        ),
        "msrb2" | "msrb3" | "msrb4" => {
            let k = name.as_bytes()[4] - b'0';
            let mut shapes = vec![Shape::new(1, c, 8, 8)];
            for i in 0..k {
                shapes.push(Shape::new(1, c, 4 << i.min(2), 4 << i.min(2)));
            }
            check_case(
                name,
                BLOCK_TOLERANCE,
                seed,
                &shapes,
                (-1.0, 1.0),
                &move |b| {
                    let blk = Msrb::new(b, "msrb", 4, k as usize)?;
                    Ok(Box::new(move |fx, ids| blk.forward(fx, ids[0], &ids[1..])))
                },
                6,
                true,
            )
        }
        "up" => check_case(
            name,
            BLOCK_TOLERANCE,
            seed,
            &[x44],
            (-1.0, 1.0),
            &|b| {
                let blk = UpModule::new(b, "up", 4)?;
                Ok(Box::new(move |fx, ids| blk.forward(fx, ids[0])))
            },
            10,
            true,
        ),
        "down" => check_case(
            name,
            BLOCK_TOLERANCE,
            seed,
            &[Shape::new(1, c, 8, 8)],
            (-1.0, 1.0),
            &|b| {
                let blk = DownModule::new(b, "down", 4)?;
                Ok(Box::new(move |fx, ids| blk.forward(fx, ids[0])))
            },
            10,
            true,
        ),
        "end_to_end" => end_to_end_check(seed),
        other if other.starts_with("pafb[") => {
            let toggles = PafbToggles {
                use_ca: other.contains("ca"),
                use_sa: other.contains("sa"),
                use_pmb: other.contains("pmb"),
            };
            check_case(
                name,
                BLOCK_TOLERANCE,
                seed,
                &[Shape::new(1, c, 8, 8), Shape::new(1, 1, 4, 4)],
                (-1.0, 1.0),
                &move |b| {
                    let blk = Pafb::new(b, "pafb", 4, toggles)?;
                    Ok(Box::new(move |fx, ids| blk.forward(fx, ids[0], ids[1])))
                },
                6,
                true,
            )
        }
        other => Err(Error::config(format!("unknown gradient check case {other}"))),
    }
}

/// Gradient check of the full super-resolver at a tiny configuration
/// (width 4, scale 4, 4x4 input), over a sampled subset of coordinates of
/// every parameter and both data inputs.
fn end_to_end_check(seed: u64) -> Result<SuiteEntry> {
    let mut cfg = ModelConfig::desk(4);
    cfg.channels = 4;
    check_case(
        "end_to_end",
        END_TO_END_TOLERANCE,
        seed,
        &[Shape::new(1, 3, 4, 4), Shape::new(1, 1, 4, 4)],
        (0.05, 0.95),
        &move |b| {
            let fish = FishFsrNet::new(b, &cfg)?;
            Ok(Box::new(move |fx, ids| fish.forward(fx, ids[0], ids[1])))
        },
        2,
        false,
    )
}

/// Run every case.
pub fn standard_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    suite_names().iter().map(|n| run_check(n, seed)).collect()
}
