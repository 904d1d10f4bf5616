//! The two networks: a parsing-map estimator and the fish-shaped
//! multi-scale super-resolver.
//!
//! The super-resolver runs features through three segments. The head
//! progressively upsamples from the input resolution to the target scale,
//! preserving the feature after every upsampling module. The body
//! downsamples back to the input resolution, refining against the
//! preserved head features before every downsampling module and
//! preserving its own intermediates. The tail upsamples to the target
//! scale again, refining against the preserved body features. Every
//! up/down module is followed by a cascade of parsing-map attention
//! fusion blocks that re-consume the parsing prior at the local feature
//! resolution.

use crate::blocks::{
    attention_reduction, DownModule, Msrb, Pafb, PafbToggles, ResBlock, UpModule,
};
use crate::error::{Error, Result};
use crate::params::{ConvParams, Forward, ParamBuilder, ParameterStore};
use crate::rng::SplitMix64;
use crate::tape::TensorId;
use crate::tensor::Scalar;

/// Everything that determines the shapes and wiring of both networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Upscale factor, one of 4, 8, 16.
    pub scale: usize,
    /// Base feature width C.
    pub channels: usize,
    /// PAFBs cascaded after each up/down module.
    pub pafb_per_stage: usize,
    /// Residual blocks inside the parsing estimator.
    pub parsingnet_resblocks: usize,
    pub use_msrb: bool,
    pub use_ca: bool,
    pub use_sa: bool,
    pub use_pmb: bool,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(scale: usize) -> Self {
        ModelConfig {
            scale,
            channels: 64,
            pafb_per_stage: 2,
            parsingnet_resblocks: 8,
            use_msrb: true,
            use_ca: true,
            use_sa: true,
            use_pmb: true,
            seed: 0,
        }
    }

    /// Narrow test-width configuration.
    pub fn desk(scale: usize) -> Self {
        ModelConfig { channels: 16, ..Self::new(scale) }
    }

    /// Number of up/down stages per segment: 2, 3, 4 for scales 4, 8, 16.
    pub fn n_stages(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    pub fn toggles(&self) -> PafbToggles {
        PafbToggles { use_ca: self.use_ca, use_sa: self.use_sa, use_pmb: self.use_pmb }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 4 | 8 | 16) {
            return Err(Error::config(format!(
                "scale must be 4, 8 or 16, got {}",
                self.scale
            )));
        }
        if self.channels == 0 || self.pafb_per_stage == 0 || self.parsingnet_resblocks == 0 {
            return Err(Error::config("channels and block counts must be positive"));
        }
        let r = attention_reduction(self.channels);
        if self.channels % r != 0 {
            return Err(Error::config(format!(
                "channel width {} must be divisible by attention reduction {r}",
                self.channels
            )));
        }
        let cat = self.n_stages() * self.channels;
        let rc = attention_reduction(cat);
        if self.use_msrb && cat % rc != 0 {
            return Err(Error::config(format!(
                "MSRB concat width {cat} must be divisible by attention reduction {rc}"
            )));
        }
        Ok(())
    }
}

/// Network segments in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Head,
    Body,
    Tail,
}

/// Resolution multiplier (relative to the input) after every up/down
/// module: the head climbs 2, 4, ..., scale; the body descends back to 1;
/// the tail climbs to scale again.
pub fn count_stage_resolutions(cfg: &ModelConfig) -> Vec<(Segment, usize)> {
    let s = cfg.n_stages();
    let mut out = Vec::with_capacity(3 * s);
    for i in 1..=s {
        out.push((Segment::Head, 1 << i));
    }
    for i in (0..s).rev() {
        out.push((Segment::Body, 1 << i));
    }
    for i in 1..=s {
        out.push((Segment::Tail, 1 << i));
    }
    out
}

/// Parsing-map estimator: head conv 3 -> C, a chain of residual blocks, a
/// tail conv C -> 1 and a sigmoid gate, so outputs live in (0, 1).
#[derive(Debug, Clone)]
pub struct ParsingNet {
    head: ConvParams,
    resblocks: Vec<ResBlock>,
    tail: ConvParams,
}

impl ParsingNet {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let head = b.conv("parsingnet.head", 3, c, 3)?;
        let resblocks = (0..cfg.parsingnet_resblocks)
            .map(|i| ResBlock::new(b, &format!("parsingnet.res{i}"), c))
            .collect::<Result<Vec<_>>>()?;
        let tail = b.conv("parsingnet.tail", c, 1, 3)?;
        Ok(ParsingNet { head, resblocks, tail })
    }

    /// Estimate a parsing map from an RGB image at the same resolution.
    pub fn forward<T: Scalar>(
        &self,
        fx: &mut Forward<'_, T>,
        lr_image: TensorId,
    ) -> Result<TensorId> {
        let s = fx.tape.shape(lr_image);
        if s.c != 3 {
            return Err(Error::contract(format!(
                "parsing estimator expects a 3-channel image, got {} channels",
                s.c
            )));
        }
        let mut h = fx.conv(self.head, lr_image, 1, 1)?;
        for blk in &self.resblocks {
            h = blk.forward(fx, h)?;
        }
        let h = fx.conv(self.tail, h, 1, 1)?;
        Ok(fx.tape.sigmoid(h))
    }
}

struct HeadStage {
    up: UpModule,
    /// Cascade after this stage's upsample; the first upsample output is
    /// preserved untouched, so stage 0 has its cascade after the next
    /// module boundary.
    pafbs: Vec<Pafb>,
}

struct BodyStage {
    msrb: Option<Msrb>,
    down: DownModule,
    pafbs: Vec<Pafb>,
}

struct TailStage {
    msrb: Option<Msrb>,
    up: UpModule,
    pafbs: Vec<Pafb>,
}

/// The super-resolver.
pub struct FishFsrNet {
    cfg: ModelConfig,
    feat: ConvParams,
    head: Vec<HeadStage>,
    body: Vec<BodyStage>,
    tail: Vec<TailStage>,
    recon: ConvParams,
}

impl FishFsrNet {
    pub(crate) fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let s = cfg.n_stages();
        let toggles = cfg.toggles();
        let pafb_cascade = |b: &mut ParamBuilder<'_, T>, name: &str| -> Result<Vec<Pafb>> {
            (0..cfg.pafb_per_stage)
                .map(|i| Pafb::new(b, &format!("{name}.pafb{i}"), c, toggles))
                .collect()
        };
        let feat = b.conv("fish.feat", 3, c, 3)?;
        let head = (0..s)
            .map(|i| {
                Ok(HeadStage {
                    up: UpModule::new(b, &format!("fish.head.s{i}.up"), c)?,
                    pafbs: pafb_cascade(b, &format!("fish.head.s{i}"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let body = (0..s)
            .map(|i| {
                Ok(BodyStage {
                    msrb: cfg
                        .use_msrb
                        .then(|| Msrb::new(b, &format!("fish.body.s{i}.msrb"), c, s))
                        .transpose()?,
                    down: DownModule::new(b, &format!("fish.body.s{i}.down"), c)?,
                    pafbs: pafb_cascade(b, &format!("fish.body.s{i}"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tail = (0..s)
            .map(|i| {
                Ok(TailStage {
                    msrb: cfg
                        .use_msrb
                        .then(|| Msrb::new(b, &format!("fish.tail.s{i}.msrb"), c, s))
                        .transpose()?,
                    up: UpModule::new(b, &format!("fish.tail.s{i}.up"), c)?,
                    pafbs: pafb_cascade(b, &format!("fish.tail.s{i}"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let recon = b.conv("fish.recon", c, 3, 3)?;
        Ok(FishFsrNet { cfg: *cfg, feat, head, body, tail, recon })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn cascade<T: Scalar>(
        pafbs: &[Pafb],
        fx: &mut Forward<'_, T>,
        mut h: TensorId,
        parsing: TensorId,
    ) -> Result<TensorId> {
        for p in pafbs {
            h = p.forward(fx, h, parsing)?;
        }
        Ok(h)
    }

    /// Super-resolve an image given its parsing map (both at the input
    /// resolution). Output is (N, 3, scale*H, scale*W).
    pub fn forward<T: Scalar>(
        &self,
        fx: &mut Forward<'_, T>,
        lr_image: TensorId,
        parsing: TensorId,
    ) -> Result<TensorId> {
        let ls = fx.tape.shape(lr_image);
        let ps = fx.tape.shape(parsing);
        if (ps.h, ps.w) != (ls.h, ls.w) {
            return Err(Error::contract(format!(
                "parsing map {}x{} must match input {}x{}",
                ps.h, ps.w, ls.h, ls.w
            )));
        }
        if ls.c != 3 {
            return Err(Error::contract(format!(
                "super-resolver expects a 3-channel image, got {} channels",
                ls.c
            )));
        }

        let f0 = fx.conv(self.feat, lr_image, 1, 1)?;

        // head: upsample n_stages times, preserving each upsample output;
        // the first preserved feature comes straight off the first upsample
        let mut head_feats = Vec::with_capacity(self.head.len());
        let mut h = f0;
        for (i, stage) in self.head.iter().enumerate() {
            if i > 0 {
                h = Self::cascade(&self.head[i - 1].pafbs, fx, h, parsing)?;
            }
            h = stage.up.forward(fx, h)?;
            head_feats.push(h);
        }
        h = Self::cascade(&self.head.last().expect("at least one stage").pafbs, fx, h, parsing)?;

        // body: refine against head features, downsample, fuse the prior
        let mut body_feats = Vec::with_capacity(self.body.len());
        for stage in &self.body {
            if let Some(msrb) = &stage.msrb {
                h = msrb.forward(fx, h, &head_feats)?;
            }
            h = stage.down.forward(fx, h)?;
            body_feats.push(h);
            h = Self::cascade(&stage.pafbs, fx, h, parsing)?;
        }

        // tail: refine against body features (nearest resolution first),
        // upsample back to the target scale
        let tail_refs: Vec<TensorId> = body_feats.iter().rev().copied().collect();
        for stage in &self.tail {
            if let Some(msrb) = &stage.msrb {
                h = msrb.forward(fx, h, &tail_refs)?;
            }
            h = stage.up.forward(fx, h)?;
            h = Self::cascade(&stage.pafbs, fx, h, parsing)?;
        }

        fx.conv(self.recon, h, 1, 1)
    }
}

/// Build both networks into one parameter store. Identical seeds yield
/// bitwise-identical parameters; names are stable dotted paths in
/// creation order.
pub fn build_model<T: Scalar>(
    cfg: &ModelConfig,
) -> Result<(ParsingNet, FishFsrNet, ParameterStore<T>)> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let mut rng = SplitMix64::new(cfg.seed);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let parsingnet = ParsingNet::new(&mut b, cfg)?;
    let fish = FishFsrNet::new(&mut b, cfg)?;
    Ok((parsingnet, fish, store))
}

/// Closed-form parameter count for a configuration.
///
/// Writing `conv(i, o, k) = o * i * k^2 + o` for a biased convolution and
/// `C` for the channel width:
/// - parsing estimator: `conv(3, C, 3) + B * 2 * conv(C, C, 3) + conv(C, 1, 3)`
///   with `B` residual blocks;
/// - channel attention over `n` channels with reduction `r`:
///   `conv(n, n/r, 1) + conv(n/r, n, 1)`;
/// - spatial attention: `conv(2, 1, 7)`;
/// - PAFB: `2 * conv(C, C, 3)` front, plus the enabled branches
///   (channel attention; spatial attention; `conv(2C, C, 1)` when both;
///   `conv(C, C, 3) + conv(1, C, 3) + 2 * conv(2C, C, 1)` for the parsing
///   branch and final fusion);
/// - MSRB over `s` preserved features: `s * 2 * conv(C, C, 3)` refine
///   projections + channel attention over `sC` + `conv(sC, C, 1)`;
/// - up module `conv(C, 4C, 3)`, down module `conv(4C, C, 3)`;
/// - fish net: `conv(3, C, 3)` + `s` up stages + `s` down stages + `s`
///   tail up stages, each with `pafb_per_stage` PAFBs (bodies and tails
///   also carry an MSRB when enabled) + `conv(C, 3, 3)`.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let c = cfg.channels;
    let s = cfg.n_stages();

    let ca = |n: usize| {
        let r = attention_reduction(n);
        conv(n, n / r, 1) + conv(n / r, n, 1)
    };
    let sa = conv(2, 1, 7);
    let resblock = 2 * conv(c, c, 3);

    let mut pafb = 2 * conv(c, c, 3);
    if cfg.use_ca {
        pafb += ca(c);
    }
    if cfg.use_sa {
        pafb += sa;
    }
    if cfg.use_ca && cfg.use_sa {
        pafb += conv(2 * c, c, 1);
    }
    if cfg.use_pmb {
        pafb += conv(c, c, 3) + conv(1, c, 3) + 2 * conv(2 * c, c, 1);
    }

    let msrb = if cfg.use_msrb { s * 2 * conv(c, c, 3) + ca(s * c) + conv(s * c, c, 1) } else { 0 };
    let up = conv(c, 4 * c, 3);
    let down = conv(4 * c, c, 3);
    let cascade = cfg.pafb_per_stage * pafb;

    let parsingnet = conv(3, c, 3) + cfg.parsingnet_resblocks * resblock + conv(c, 1, 3);
    let fish = conv(3, c, 3)
        + s * (up + cascade)
        + s * (msrb + down + cascade)
        + s * (msrb + up + cascade)
        + conv(c, 3, 3);
    parsingnet + fish
}
