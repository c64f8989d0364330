//! The Deform-Mamba super-resolution network: a four-level UNet whose encoder
//! levels add a modulated deform block to a vision Mamba stack, with a
//! multi-view atrous context block at the bottleneck.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::deform::{ModulatedDeformBlock, DEFAULT_MAX_OFFSET};
use crate::error::{Error, Result};
use crate::nn::{seeded_rng, Bound, Conv2d, LayerNorm, Linear, ParamBuilder, ParamId, ParamStore};
use crate::ops::Conv2dOptions;
use crate::ss2d::{VisionMambaBlock, VisionMambaOptions, CHANNEL_ATTENTION_REDUCTION};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LEVELS: usize = 4;
pub const MERGES: usize = LEVELS - 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Super-resolution factor `r`.
    pub scale: usize,
    pub patch_size: usize,
    pub channels: Vec<usize>,
    pub vmamba_blocks_per_level: usize,
    pub state_dim: usize,
    pub use_deform: bool,
    pub use_mvc: bool,
    pub use_celoss: bool,
    pub mvc_dilations: Vec<usize>,
    /// CELoss weight β.
    pub celoss_weight: f64,
    /// Divide CELoss by the pixel count.
    pub celoss_normalized: bool,
    /// Add a nearest-neighbour upsampling of the input to the output.
    pub global_residual: bool,
    /// Multiplier on the fan-in uniform bound `1/√fan_in`.
    pub init_gain: f64,
    pub max_offset: f64,
    /// One S6 layer shared by all four scan directions.
    pub shared_scan_directions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale preset.
    pub fn tiny() -> Self {
        ModelConfig {
            scale: 2,
            patch_size: 2,
            channels: vec![8, 12, 16, 24],
            vmamba_blocks_per_level: 1,
            state_dim: 4,
            use_deform: true,
            use_mvc: true,
            use_celoss: true,
            mvc_dilations: vec![1, 2, 4],
            celoss_weight: 0.1,
            celoss_normalized: true,
            global_residual: true,
            init_gain: 1.0,
            max_offset: DEFAULT_MAX_OFFSET,
            shared_scan_directions: false,
        }
    }

    /// Full-size configuration: channels `[96, 128, 384, 768]`, four vision
    /// Mamba blocks per level.
    pub fn paper_full() -> Self {
        ModelConfig {
            channels: vec![96, 128, 384, 768],
            vmamba_blocks_per_level: 4,
            state_dim: crate::ssm::DEFAULT_STATE_DIM,
            ..ModelConfig::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper-full" => Ok(Self::paper_full()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected tiny or paper-full)"))),
        }
    }

    /// β actually applied to the CELoss term.
    pub fn effective_celoss_weight(&self) -> f64 {
        if self.use_celoss {
            self.celoss_weight
        } else {
            0.0
        }
    }

    /// Required divisor of the upsampled image extents.
    pub fn divisibility(&self) -> usize {
        self.patch_size << MERGES
    }

    /// Required divisor of the low-resolution input extents.
    pub fn lr_divisibility(&self) -> usize {
        let d = self.divisibility();
        d / gcd(d, self.scale)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !matches!(self.scale, 2 | 4) {
            return bad(format!("scale must be 2 or 4, got {}", self.scale));
        }
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if self.channels.len() != LEVELS {
            return bad(format!("channels must list {LEVELS} levels, got {}", self.channels.len()));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % CHANNEL_ATTENTION_REDUCTION != 0) {
            return bad(format!(
                "channel count {c} must be a positive multiple of {CHANNEL_ATTENTION_REDUCTION}"
            ));
        }
        if self.vmamba_blocks_per_level == 0 || self.state_dim == 0 {
            return bad("vmamba_blocks_per_level and state_dim must be positive".into());
        }
        if self.use_mvc {
            let n = self.mvc_dilations.len();
            let c = self.channels[LEVELS - 1];
            if n == 0 || c % n != 0 || self.mvc_dilations.contains(&0) {
                return bad(format!(
                    "bottleneck channels {c} must split evenly over dilations {:?}",
                    self.mvc_dilations
                ));
            }
        }
        if !(self.celoss_weight >= 0.0) {
            return bad(format!("celoss_weight must be non-negative, got {}", self.celoss_weight));
        }
        if !(self.init_gain > 0.0) || !(self.max_offset > 0.0) {
            return bad("init_gain and max_offset must be positive".into());
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Nearest-neighbour upsampling of a `[C, H, W]` tensor by `r`.
pub fn nearest_upsample(x: &Tensor, r: usize) -> Result<Tensor> {
    let (index, shape) = nearest_index(x.shape(), r)?;
    Ok(Tensor::from_fn(shape, |i| x.data()[index[i]]))
}

/// Differentiable [`nearest_upsample`].
pub fn nearest_upsample_var<'t>(x: Var<'t>, r: usize) -> Result<Var<'t>> {
    let (index, shape) = nearest_index(&x.shape(), r)?;
    x.gather(Rc::new(index), shape)
}

fn nearest_index(shape: &[usize], r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let &[c, h, w] = shape else {
        return Err(Error::dim(format!("nearest_upsample expects [C,H,W], got {shape:?}")));
    };
    let (oh, ow) = (h * r, w * r);
    let index = (0..c * oh * ow)
        .map(|i| {
            let (ch, rest) = (i / (oh * ow), i % (oh * ow));
            let (y, xx) = (rest / ow, rest % ow);
            (ch * h + y / r) * w + xx / r
        })
        .collect();
    Ok((index, vec![c, oh, ow]))
}

fn require_even(x: &Var<'_>, what: &str) -> Result<(usize, usize, usize)> {
    let &[c, h, w] = &x.shape()[..] else {
        return Err(Error::dim(format!("{what} expects [C,H,W], got {:?}", x.shape())));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!("{what} needs even extents, got {h}x{w}")));
    }
    Ok((c, h, w))
}

/// Learnable sub-pixel upsampling: 3×3 conv to `r²` channels, then shuffle.
#[derive(Debug, Clone)]
pub struct PixelShuffleUpsample {
    pub conv: Conv2d,
    pub scale: usize,
}

impl PixelShuffleUpsample {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, scale: usize) -> Self {
        let conv = Conv2d::new(pb, name, channels, channels * scale * scale, 3, Conv2dOptions::padded(1), true);
        PixelShuffleUpsample { conv, scale }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.conv.forward(p, x)?.pixel_shuffle(self.scale)
    }
}

/// Non-overlapping `ps × ps` patches projected to `C₀` channels.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub patch_size: usize,
}

impl PatchEmbed {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c_in: usize, c_out: usize, patch_size: usize) -> Self {
        let proj = Conv2d::new(pb, name, c_in * patch_size * patch_size, c_out, 1, Conv2dOptions::default(), true);
        PatchEmbed { proj, patch_size }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let &[_, h, w] = &x.shape()[..] else {
            return Err(Error::dim("patch_embed expects [C,H,W]"));
        };
        let ps = self.patch_size;
        if h % ps != 0 || w % ps != 0 {
            return Err(Error::Config(format!("patch size {ps} does not divide {h}x{w}")));
        }
        self.proj.forward(p, x.pixel_unshuffle(ps)?)
    }
}

/// `2×2` neighbourhoods to `4C` channels, layer norm, linear to `C_next`.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerging {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize, c_next: usize) -> Self {
        let mut pb = pb.child(name);
        PatchMerging {
            norm: LayerNorm::new(&mut pb, "norm", 4 * c),
            reduce: Linear::new(&mut pb, "reduce", 4 * c, c_next, false),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (_, h, w) = require_even(&x, "patch merging")?;
        let t = x.pixel_unshuffle(2)?.to_tokens()?;
        let t = self.reduce.forward(p, self.norm.forward(p, t)?)?;
        t.from_tokens(h / 2, w / 2)
    }
}

/// Linear to `4·C_prev` channels, then a 2× pixel shuffle.
#[derive(Debug, Clone)]
pub struct PatchExpanding {
    pub expand: Linear,
}

impl PatchExpanding {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize, c_prev: usize) -> Self {
        PatchExpanding {
            expand: Linear::new(pb, name, c, 4 * c_prev, false),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let &[_, h, w] = &x.shape()[..] else {
            return Err(Error::dim("patch expanding expects [C,H,W]"));
        };
        self.expand.forward(p, x.to_tokens()?)?.from_tokens(h, w)?.pixel_shuffle(2)
    }
}

/// Parallel atrous 3×3 convolutions, concatenated, fused by a 1×1 conv and
/// added back to the input.
#[derive(Debug, Clone)]
pub struct MultiViewContext {
    pub branches: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl MultiViewContext {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, dilations: &[usize]) -> Result<Self> {
        if dilations.is_empty() || channels % dilations.len() != 0 {
            return Err(Error::Config(format!(
                "{channels} channels do not split over {} dilation branches",
                dilations.len()
            )));
        }
        let width = channels / dilations.len();
        let mut pb = pb.child(name);
        let branches = dilations
            .iter()
            .map(|&d| {
                let opts = Conv2dOptions::padded(d).with_dilation(d);
                Conv2d::new(&mut pb, &format!("dilation{d}"), channels, width, 3, opts, true)
            })
            .collect();
        let fuse = Conv2d::new(&mut pb, "fuse", channels, channels, 1, Conv2dOptions::default(), false);
        Ok(MultiViewContext { branches, fuse })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let views = self
            .branches
            .iter()
            .map(|b| b.forward(p, x))
            .collect::<Result<Vec<_>>>()?;
        x.add(self.fuse.forward(p, Var::concat(&views)?)?)
    }

    /// Branch weights and biases; zeroing them collapses the block to identity.
    pub fn branch_params(&self) -> Vec<ParamId> {
        self.branches.iter().flat_map(Conv2d::params).collect()
    }
}

/// Encoder level: `deform(x) + stack(x)`, or the stack alone without deform.
#[derive(Debug, Clone)]
pub struct DeformMambaModule {
    pub deform: Option<ModulatedDeformBlock>,
    pub stack: Vec<VisionMambaBlock>,
}

fn vmamba_stack(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, cfg: &ModelConfig) -> Result<Vec<VisionMambaBlock>> {
    let opts = VisionMambaOptions {
        state_dim: cfg.state_dim,
        shared_directions: cfg.shared_scan_directions,
        reduction: CHANNEL_ATTENTION_REDUCTION,
    };
    let mut pb = pb.child(name);
    (0..cfg.vmamba_blocks_per_level)
        .map(|i| VisionMambaBlock::new(&mut pb, &format!("block{i}"), channels, opts))
        .collect()
}

fn run_stack<'t>(stack: &[VisionMambaBlock], p: &Bound<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
    for block in stack {
        x = block.forward(p, x)?;
    }
    Ok(x)
}

impl DeformMambaModule {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, cfg: &ModelConfig) -> Result<Self> {
        let mut pb = pb.child(name);
        let deform = cfg
            .use_deform
            .then(|| ModulatedDeformBlock::new(&mut pb, "deform", channels, cfg.max_offset));
        let stack = vmamba_stack(&mut pb, "vmamba", channels, cfg)?;
        Ok(DeformMambaModule { deform, stack })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mamba = run_stack(&self.stack, p, x)?;
        match &self.deform {
            Some(d) => d.forward(p, x)?.add(mamba),
            None => Ok(mamba),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLevel {
    pub expand: PatchExpanding,
    /// Halves the channels after concatenating the skip connection.
    pub fuse_skip: Linear,
    pub stack: Vec<VisionMambaBlock>,
}

#[derive(Debug, Clone)]
pub struct DeformMambaNet {
    pub config: ModelConfig,
    pub upsample: PixelShuffleUpsample,
    pub embed: PatchEmbed,
    pub encoder: Vec<DeformMambaModule>,
    pub merges: Vec<PatchMerging>,
    pub context: Option<MultiViewContext>,
    /// Ordered from the bottleneck outwards.
    pub decoder: Vec<DecoderLevel>,
    pub head: Linear,
}

impl DeformMambaNet {
    /// Builds the network and its freshly initialized parameters.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, config.init_gain);
        let net = Self::build(config, &mut pb)?;
        Ok((net, store))
    }

    fn build(cfg: &ModelConfig, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        let ch = &cfg.channels;
        let upsample = PixelShuffleUpsample::new(pb, "upsample", 1, cfg.scale);
        let embed = PatchEmbed::new(pb, "patch_embed", 1, ch[0], cfg.patch_size);
        let mut encoder = Vec::with_capacity(MERGES);
        let mut merges = Vec::with_capacity(MERGES);
        for level in 0..MERGES {
            encoder.push(DeformMambaModule::new(pb, &format!("encoder{level}"), ch[level], cfg)?);
            merges.push(PatchMerging::new(pb, &format!("merge{level}"), ch[level], ch[level + 1]));
        }
        let context = if cfg.use_mvc {
            Some(MultiViewContext::new(pb, "context", ch[LEVELS - 1], &cfg.mvc_dilations)?)
        } else {
            None
        };
        let mut decoder = Vec::with_capacity(MERGES);
        for level in (0..MERGES).rev() {
            let mut dpb = pb.child(&format!("decoder{level}"));
            decoder.push(DecoderLevel {
                expand: PatchExpanding::new(&mut dpb, "expand", ch[level + 1], ch[level]),
                fuse_skip: Linear::new(&mut dpb, "fuse_skip", 2 * ch[level], ch[level], true),
                stack: vmamba_stack(&mut dpb, "vmamba", ch[level], cfg)?,
            });
        }
        let ps = cfg.patch_size;
        let head = Linear::new(pb, "head", ch[0], ps * ps, true);
        Ok(DeformMambaNet {
            config: cfg.clone(),
            upsample,
            embed,
            encoder,
            merges,
            context,
            decoder,
            head,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let &[1, h, w] = shape else {
            return Err(Error::dim(format!("expected a [1,H,W] image, got {shape:?}")));
        };
        let d = self.config.lr_divisibility();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} incompatible with the model: extents must be multiples of {d} \
                 (scale {} × extent divisible by patch_size·{})",
                self.config.scale,
                1 << MERGES
            )));
        }
        Ok((h, w))
    }

    /// `[1, H, W] -> [1, rH, rW]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, lr: Var<'t>) -> Result<Var<'t>> {
        self.check_input(&lr.shape())?;
        let up = self.upsample.forward(p, lr)?;
        let (_, uh, uw) = (up.shape()[0], up.shape()[1], up.shape()[2]);
        let mut x = self.embed.forward(p, up)?;
        let mut skips = Vec::with_capacity(MERGES);
        for (module, merge) in self.encoder.iter().zip(&self.merges) {
            let y = module.forward(p, x)?;
            skips.push(y);
            x = merge.forward(p, y)?;
        }
        if let Some(ctx) = &self.context {
            x = ctx.forward(p, x)?;
        }
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let up = level.expand.forward(p, x)?;
            let (h, w) = (up.shape()[1], up.shape()[2]);
            let joined = Var::concat(&[up, skip])?.to_tokens()?;
            let fused = level.fuse_skip.forward(p, joined)?.from_tokens(h, w)?;
            x = run_stack(&level.stack, p, fused)?;
        }
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let ps = self.config.patch_size;
        let out = self.head.forward(p, x.to_tokens()?)?.from_tokens(h, w)?.pixel_shuffle(ps)?;
        debug_assert_eq!(out.shape(), vec![1, uh, uw]);
        if self.config.global_residual {
            out.add(nearest_upsample_var(lr, self.config.scale)?)
        } else {
            Ok(out)
        }
    }

    /// Inference without recording gradients for the parameters.
    pub fn infer(&self, params: &ParamStore, lr: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let out = self.forward(&bound, tape.constant(lr.clone()))?.value();
        Ok((*out).clone())
    }
}
