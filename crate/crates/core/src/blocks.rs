//! Composite differentiable blocks: residual block, channel and spatial
//! attention, pixel-shuffle up/down modules, the error-feedback refine
//! block, the multi-scale refine block (MSRB), and the parsing-map
//! attention fusion block (PAFB).
//!
//! Blocks hold parameter handles only; the tensors live in a
//! [`ParameterStore`] and forwards run through a [`Forward`] staging
//! context, so one block definition serves f32 training and f64 gradient
//! checking alike.

use crate::error::{Error, Result};
use crate::params::{ConvParams, Forward, ParamBuilder};
use crate::tape::TensorId;
use crate::tensor::Scalar;

/// Init scale for the last convolution of every residual branch. Kaiming
/// init alone roughly doubles activation variance per residual block, so
/// a stack of dozens amplifies an input by orders of magnitude before
/// training starts; damping the branch output keeps the whole network
/// O(1) at init while leaving the draw sequence (and so determinism)
/// untouched.
pub const RESIDUAL_BRANCH_INIT_SCALE: f64 = 0.1;

/// Reduction ratio for channel attention: 16 at full width, 4 for narrow
/// (< 32 channel) configurations so the squeezed width stays positive.
pub fn attention_reduction(channels: usize) -> usize {
    if channels < 32 {
        4
    } else {
        16
    }
}

/// conv3x3 - ReLU - conv3x3 with an identity skip. No normalization, no
/// activation after the sum.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: ConvParams,
    conv2: ConvParams,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(ResBlock {
            conv1: b.conv(&format!("{name}.conv1"), channels, channels, 3)?,
            conv2: b.conv_scaled(
                &format!("{name}.conv2"),
                channels,
                channels,
                3,
                RESIDUAL_BRANCH_INIT_SCALE,
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: TensorId) -> Result<TensorId> {
        let h = fx.conv(self.conv1, x, 1, 1)?;
        let h = fx.tape.relu(h);
        let h = fx.conv(self.conv2, h, 1, 1)?;
        fx.tape.add(x, h)
    }
}

/// Squeeze-and-excitation gate: global average pool, 1x1 reduce, ReLU,
/// 1x1 expand, sigmoid, then scale the input per channel.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    reduce: ConvParams,
    expand: ConvParams,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let r = attention_reduction(channels);
        if channels % r != 0 {
            return Err(Error::config(format!(
                "channel attention over {channels} channels needs divisibility by reduction {r}"
            )));
        }
        Ok(ChannelAttention {
            reduce: b.conv(&format!("{name}.reduce"), channels, channels / r, 1)?,
            expand: b.conv(&format!("{name}.expand"), channels / r, channels, 1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: TensorId) -> Result<TensorId> {
        let g = fx.tape.global_avg_pool(x);
        let g = fx.conv(self.reduce, g, 1, 0)?;
        let g = fx.tape.relu(g);
        let g = fx.conv(self.expand, g, 1, 0)?;
        let g = fx.tape.sigmoid(g);
        fx.tape.mul(x, g)
    }
}

/// Per-pixel gate from cross-channel mean/max statistics through a 7x7
/// convolution and sigmoid.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    conv: ConvParams,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str) -> Result<Self> {
        Ok(SpatialAttention { conv: b.conv(&format!("{name}.conv"), 2, 1, 7)? })
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: TensorId) -> Result<TensorId> {
        let stats = fx.tape.channel_stats(x);
        let g = fx.conv(self.conv, stats, 1, 3)?;
        let g = fx.tape.sigmoid(g);
        fx.tape.mul(x, g)
    }
}

/// x2 upsampling: conv C -> 4C then pixel shuffle.
#[derive(Debug, Clone)]
pub struct UpModule {
    conv: ConvParams,
}

impl UpModule {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(UpModule { conv: b.conv(&format!("{name}.conv"), channels, 4 * channels, 3)? })
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: TensorId) -> Result<TensorId> {
        let h = fx.conv(self.conv, x, 1, 1)?;
        fx.tape.pixel_shuffle(h)
    }
}

/// x2 downsampling: pixel unshuffle then conv 4C -> C, keeping every
/// inter-block feature at width C.
#[derive(Debug, Clone)]
pub struct DownModule {
    conv: ConvParams,
}

impl DownModule {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(DownModule { conv: b.conv(&format!("{name}.conv"), 4 * channels, channels, 3)? })
    }

    pub fn forward<T: Scalar>(&self, fx: &mut Forward<'_, T>, x: TensorId) -> Result<TensorId> {
        let h = fx.tape.pixel_unshuffle(x)?;
        fx.conv(self.conv, h, 1, 1)
    }
}

/// Error-feedback refinement: resize the previous feature to the current
/// resolution, take the difference, project it through two convs, and add
/// it back onto the current feature.
#[derive(Debug, Clone)]
pub struct RefineBlock {
    proj1: ConvParams,
    proj2: ConvParams,
}

impl RefineBlock {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(RefineBlock {
            proj1: b.conv(&format!("{name}.proj1"), channels, channels, 3)?,
            proj2: b.conv_scaled(
                &format!("{name}.proj2"),
                channels,
                channels,
                3,
                RESIDUAL_BRANCH_INIT_SCALE,
            )?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        fx: &mut Forward<'_, T>,
        f_current: TensorId,
        f_prev: TensorId,
    ) -> Result<TensorId> {
        let cur = fx.tape.shape(f_current);
        let prev = fx.tape.shape(f_prev);
        if cur.c != prev.c {
            return Err(Error::contract(format!(
                "refine block features must share channels, got {} and {}",
                cur.c, prev.c
            )));
        }
        let aligned = fx.tape.nearest_resize(f_prev, cur.h, cur.w)?;
        let err = fx.tape.sub(f_current, aligned)?;
        let p = fx.conv(self.proj1, err, 1, 1)?;
        let p = fx.tape.relu(p);
        let p = fx.conv(self.proj2, p, 1, 1)?;
        fx.tape.add(p, f_current)
    }
}

/// Multi-scale refine block: one refine block per preserved feature,
/// channel attention over the concatenated refinements, a 1x1 fusion back
/// to width C, and a residual sum with the current feature.
#[derive(Debug, Clone)]
pub struct Msrb {
    refines: Vec<RefineBlock>,
    attention: ChannelAttention,
    fuse: ConvParams,
}

impl Msrb {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        num_prev: usize,
    ) -> Result<Self> {
        if num_prev == 0 {
            return Err(Error::config("MSRB needs at least one preserved feature"));
        }
        let refines = (0..num_prev)
            .map(|i| RefineBlock::new(b, &format!("{name}.refine{i}"), channels))
            .collect::<Result<Vec<_>>>()?;
        let attention = ChannelAttention::new(b, &format!("{name}.ca"), num_prev * channels)?;
        let fuse = b.conv_scaled(
            &format!("{name}.fuse"),
            num_prev * channels,
            channels,
            1,
            RESIDUAL_BRANCH_INIT_SCALE,
        )?;
        Ok(Msrb { refines, attention, fuse })
    }

    pub fn num_prev(&self) -> usize {
        self.refines.len()
    }

    pub fn forward<T: Scalar>(
        &self,
        fx: &mut Forward<'_, T>,
        f_current: TensorId,
        f_prevs: &[TensorId],
    ) -> Result<TensorId> {
        if f_prevs.len() != self.refines.len() {
            return Err(Error::contract(format!(
                "MSRB expects {} preserved features, got {}",
                self.refines.len(),
                f_prevs.len()
            )));
        }
        let refined = self
            .refines
            .iter()
            .zip(f_prevs)
            .map(|(rb, &prev)| rb.forward(fx, f_current, prev))
            .collect::<Result<Vec<_>>>()?;
        let cat = fx.tape.concat_channels(&refined)?;
        let attended = self.attention.forward(fx, cat)?;
        let fused = fx.conv(self.fuse, attended, 1, 0)?;
        fx.tape.add(f_current, fused)
    }
}

/// Which PAFB branches exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PafbToggles {
    pub use_ca: bool,
    pub use_sa: bool,
    pub use_pmb: bool,
}

impl PafbToggles {
    pub fn all() -> Self {
        PafbToggles { use_ca: true, use_sa: true, use_pmb: true }
    }

    pub fn none() -> Self {
        PafbToggles { use_ca: false, use_sa: false, use_pmb: false }
    }
}

#[derive(Debug, Clone)]
struct ParsingBranch {
    conv_feat: ConvParams,
    conv_map: ConvParams,
    fuse: ConvParams,
}

/// Parsing-map attention fusion block.
///
/// The front is always conv3x3 - ReLU - conv3x3 on the incoming feature.
/// The attention branch applies the enabled channel/spatial gates to the
/// front output (fusing with a 1x1 conv when both run; passing the front
/// output through untouched when neither does). The parsing branch, when
/// enabled, projects the feature and the nearest-resized parsing map into
/// a common width and fuses them. Branch outputs are combined by a final
/// 1x1 fusion when both branches exist, and the block closes with a
/// residual add of its input. With every toggle off the block reduces to
/// a plain residual block.
#[derive(Debug, Clone)]
pub struct Pafb {
    conv1: ConvParams,
    conv2: ConvParams,
    ca: Option<ChannelAttention>,
    sa: Option<SpatialAttention>,
    attn_fuse: Option<ConvParams>,
    parsing: Option<ParsingBranch>,
    final_fuse: Option<ConvParams>,
    toggles: PafbToggles,
}

impl Pafb {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        toggles: PafbToggles,
    ) -> Result<Self> {
        let conv1 = b.conv(&format!("{name}.conv1"), channels, channels, 3)?;
        let conv2 = b.conv_scaled(
            &format!("{name}.conv2"),
            channels,
            channels,
            3,
            RESIDUAL_BRANCH_INIT_SCALE,
        )?;
        let ca = toggles
            .use_ca
            .then(|| ChannelAttention::new(b, &format!("{name}.ca"), channels))
            .transpose()?;
        let sa = toggles
            .use_sa
            .then(|| SpatialAttention::new(b, &format!("{name}.sa")))
            .transpose()?;
        let attn_fuse = (toggles.use_ca && toggles.use_sa)
            .then(|| b.conv(&format!("{name}.attn_fuse"), 2 * channels, channels, 1))
            .transpose()?;
        let parsing = toggles
            .use_pmb
            .then(|| -> Result<ParsingBranch> {
                Ok(ParsingBranch {
                    conv_feat: b.conv(&format!("{name}.pmb.feat"), channels, channels, 3)?,
                    conv_map: b.conv(&format!("{name}.pmb.map"), 1, channels, 3)?,
                    fuse: b.conv(&format!("{name}.pmb.fuse"), 2 * channels, channels, 1)?,
                })
            })
            .transpose()?;
        let final_fuse = toggles
            .use_pmb
            .then(|| {
                b.conv_scaled(
                    &format!("{name}.final_fuse"),
                    2 * channels,
                    channels,
                    1,
                    RESIDUAL_BRANCH_INIT_SCALE,
                )
            })
            .transpose()?;
        Ok(Pafb { conv1, conv2, ca, sa, attn_fuse, parsing, final_fuse, toggles })
    }

    pub fn toggles(&self) -> PafbToggles {
        self.toggles
    }

    pub fn forward<T: Scalar>(
        &self,
        fx: &mut Forward<'_, T>,
        f: TensorId,
        parsing_map: TensorId,
    ) -> Result<TensorId> {
        let h = fx.conv(self.conv1, f, 1, 1)?;
        let h = fx.tape.relu(h);
        let h = fx.conv(self.conv2, h, 1, 1)?;

        let f_a = match (&self.ca, &self.sa) {
            (Some(ca), Some(sa)) => {
                let c = ca.forward(fx, h)?;
                let s = sa.forward(fx, h)?;
                let cat = fx.tape.concat_channels(&[c, s])?;
                fx.conv(self.attn_fuse.expect("fuse exists when both attentions do"), cat, 1, 0)?
            }
            (Some(ca), None) => ca.forward(fx, h)?,
            (None, Some(sa)) => sa.forward(fx, h)?,
            (None, None) => h,
        };

        let combined = match &self.parsing {
            Some(branch) => {
                let ps = fx.tape.shape(parsing_map);
                if ps.c != 1 {
                    return Err(Error::contract(format!(
                        "parsing map must be single-channel, got {} channels",
                        ps.c
                    )));
                }
                let fs = fx.tape.shape(f);
                let pf = fx.conv(branch.conv_feat, f, 1, 1)?;
                let pm = fx.tape.nearest_resize(parsing_map, fs.h, fs.w)?;
                let pm = fx.conv(branch.conv_map, pm, 1, 1)?;
                let cat = fx.tape.concat_channels(&[pf, pm])?;
                let f_p = fx.conv(branch.fuse, cat, 1, 0)?;
                let both = fx.tape.concat_channels(&[f_a, f_p])?;
                fx.conv(self.final_fuse.expect("final fuse exists with parsing branch"), both, 1, 0)?
            }
            None => f_a,
        };
        fx.tape.add(f, combined)
    }
}
